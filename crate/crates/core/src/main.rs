fn main() -> std::process::ExitCode {
    tcqb::cli::main_entry()
}
