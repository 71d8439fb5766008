fn main() -> std::process::ExitCode {
    nplda::cli::main()
}
