//! The continuous 6D rotation code: encode, decode through Gram–Schmidt, and
//! compare its smoothness with axis-angle across the π boundary.
//!
//! `cargo run --example rotation_codec`

use compliant_diffusion::geometry::{encode_6d, rotation_log, sixd_to_rotmat, Rot6D, RotationMatrix};
use nalgebra::Vector3;

fn main() {
    let r = RotationMatrix::from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), 2.0);
    let code = encode_6d(&r);
    println!("6D code: {:?}", code.0.map(|v| (v * 1e4).round() / 1e4));
    let back = sixd_to_rotmat(&code).expect("valid code");
    println!("round-trip error: {:.2e}", (back.matrix() - r.matrix()).amax());

    // A network output is never exactly orthonormal; decoding projects it.
    let noisy = Rot6D(code.0.map(|v| v + 0.05));
    let fixed = sixd_to_rotmat(&noisy).expect("non-degenerate");
    let m = fixed.matrix();
    println!("decoded noisy code: det {:.12}, ‖RᵀR − I‖ {:.1e}", m.determinant(), (m.transpose() * m).amax() - 1.0);

    println!("\n angle | Δ6D    | Δaxis-angle");
    let axis = Vector3::z();
    let mut prev: Option<(Rot6D, Vector3<f64>)> = None;
    for i in 0..=12 {
        let angle = 2.9 + 0.05 * i as f64;
        let r = RotationMatrix::from_axis_angle(&axis, angle);
        let (c, aa) = (encode_6d(&r), rotation_log(r.matrix()));
        if let Some((pc, paa)) = prev {
            let d6 = c.0.iter().zip(&pc.0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            println!(" {angle:.2}  | {d6:.4} | {:.4}", (aa - paa).norm());
        }
        prev = Some((c, aa));
    }
}
