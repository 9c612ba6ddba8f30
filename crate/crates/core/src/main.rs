fn main() {
    std::process::exit(inflate3d_core::cli::run(std::env::args_os()));
}
