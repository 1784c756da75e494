mod kernels;
mod kse;
mod langevin;
mod nls;
mod topo;

pub type Outcome = mdclosure::Result<(bool, String)>;
pub type Criterion = (&'static str, &'static str, fn() -> Outcome);

pub fn criteria() -> Vec<Criterion> {
    vec![
        ("ac1", "Langevin exit time and reaction rate", langevin::ac1),
        ("ac2", "prediction horizon grows with training length", langevin::ac2),
        ("ac3", "strong-error rates of a biased closure", langevin::ac3),
        ("ac4", "topographic closure with theta history", topo::ac4),
        ("ac5", "KSE closure skill and spectrum", kse::ac5),
        ("ac6", "NLS zero-mode closure", nls::ac6),
        ("ac7", "numerical kernel properties", kernels::ac7),
    ]
}
