fn main() -> std::process::ExitCode {
    personadb::cli::run()
}
