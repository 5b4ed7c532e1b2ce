//! Flow colour coding: hue from direction, saturation from magnitude.

use rtn_core::data::Image;
use rtn_core::geometry::FlowField;

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Zero flow is white; the longest vector is fully saturated.
pub fn flow_to_image(flow: &FlowField) -> Image {
    let max = flow.data().chunks(2).map(|p| p[0].hypot(p[1])).fold(0.0, f64::max);
    let data = flow
        .data()
        .chunks(2)
        .flat_map(|p| {
            let mag = if max > 0.0 { p[0].hypot(p[1]) / max } else { 0.0 };
            let angle = p[1].atan2(p[0]) / std::f64::consts::TAU;
            hsv(angle, mag, 1.0)
        })
        .collect();
    Image::new(flow.height(), flow.width(), data).expect("flow dims are positive")
}
