fn main() {
    env_logger::init();
    std::process::exit(supericl::cli::main_entry());
}
