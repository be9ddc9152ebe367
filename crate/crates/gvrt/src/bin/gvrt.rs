fn main() {
    std::process::exit(gvrt::harness::cli_main());
}
