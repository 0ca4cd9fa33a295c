fn main() {
    std::process::exit(bnn_select::cli::run(std::env::args_os()));
}
