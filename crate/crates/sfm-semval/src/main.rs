fn main() {
    std::process::exit(sfm_semval::cli::run());
}
