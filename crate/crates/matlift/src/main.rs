fn main() {
    std::process::exit(matlift::cli::run());
}
