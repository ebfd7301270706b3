fn main() {
    std::process::exit(tweetaffect::cli::main_with_args(std::env::args_os()));
}
