//! Reference bridge sidecar: serves `ols-ref` and `knn-missing-ref` over
//! stdio or TCP.

fn main() {
    if let Err(e) = condshap::bridge::reference::run_from_args(std::env::args().skip(1)) {
        eprintln!("condshap-refsidecar: {e}");
        std::process::exit(2);
    }
}
