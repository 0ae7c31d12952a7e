fn main() {
    std::process::exit(pseudolabel_kit_cli::run(std::env::args_os()));
}
