fn main() {
    std::process::exit(sc_calib::cli::run(std::env::args_os()));
}
