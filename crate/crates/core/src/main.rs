fn main() {
    std::process::exit(grpo_d_lab::harness::main_with_args(std::env::args_os()));
}
