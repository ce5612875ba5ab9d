fn main() {
    qmat_core::tune_allocator();
    std::process::exit(qmat_cli::run(std::env::args_os()));
}
