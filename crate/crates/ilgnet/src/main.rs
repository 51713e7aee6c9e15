fn main() {
    // Die quietly when a downstream pipe closes early (`ilgnet ... | head`)
    // instead of panicking on the failed write.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(ilgnet::cli::run());
}
