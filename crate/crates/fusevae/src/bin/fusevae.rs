fn main() {
    std::process::exit(fusevae::cli::main_entry());
}
