fn main() {
    std::process::exit(imlkit::run_cli());
}
