//! Exponential/logarithm maps, composition and the cube symmetry group.

use manhattan_rotation::so3::{
    between, cube_group, distance_modulo_cube, exp_map, geodesic_distance, log_map, Rotation,
};
use nalgebra::Vector3;

fn main() {
    let a = exp_map(&Vector3::new(0.0, 0.0, 30f64.to_radians()));
    let b = exp_map(&Vector3::new(10f64.to_radians(), 0.0, 0.0));
    let ab = a.compose(&b);
    println!("a·b           = {ab:?}");
    println!("log(a·b)      = {:.6?}", log_map(&ab).as_slice());
    println!("between(a, b) = {:.6?}", between(&a, &b).as_slice());
    println!("d(a, b)       = {:.3} deg", geodesic_distance(&a, &b).to_degrees());

    let group = cube_group();
    println!("cube group has {} elements", group.len());
    let relabeled = a.compose(&group[7]);
    println!(
        "a vs a·S: {:.1} deg apart, {:.1e} deg modulo the cube group",
        geodesic_distance(&a, &relabeled).to_degrees(),
        distance_modulo_cube(&a, &relabeled).to_degrees()
    );
    let q = Rotation::from_xyzw(0.0, 0.0, 0.0, 1.0);
    println!("identity quaternion round-trips: {:?}", q.to_xyzw());
}
