use std::io::Write;

fn main() {
    let (mut out, mut err) = (std::io::stdout(), std::io::stderr());
    let code = kcr_core::cli::run(std::env::args_os(), &mut out, &mut err);
    let _ = out.flush();
    std::process::exit(code);
}
