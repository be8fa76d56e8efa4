// Tensor graphs allocate and free large buffers every step; glibc keeps returning them to the OS.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    std::process::exit(minexplain::cli::run(std::env::args_os()));
}
