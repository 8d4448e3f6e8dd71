fn main() {
    std::process::exit(kpeflow::cli::main_entry());
}
