use facemark_core::viz;
use ndarray::Array3;
use std::path::Path;

fn main() {
    let entries = vec![
        ("identity".to_string(), 0.012),
        ("jpeg q50".to_string(), 0.183),
        ("blur k5 s1.50".to_string(), 0.094),
        ("saturation up 0.30".to_string(), 0.061),
        ("noise s0.050".to_string(), 0.127),
        ("faceswap + jpeg q75".to_string(), 0.478),
    ];
    viz::render_bar_chart(
        "localizer ber per distortion (0123456789.%)",
        &entries,
        Path::new("/tmp/preview_chart.png"),
    )
    .unwrap();
    let image = Array3::from_shape_fn((3, 96, 128), |(c, y, x)| {
        0.35 + 0.25 * (((x + 13 * c) as f64) / 19.0).sin() * ((y as f64) / 11.0).cos()
    });
    let faces = [([10.0, 14.0, 52.0, 62.0], true), ([70.0, 20.0, 112.0, 70.0], false)];
    let out = viz::overlay_flags(&image, &faces);
    facemark_core::data::save_image(Path::new("/tmp/preview_overlay.png"), &out).unwrap();
}
