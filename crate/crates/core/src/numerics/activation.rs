//! GELU in its tanh form, with first and second derivatives.

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const CUBIC: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu_second(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + CUBIC * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * CUBIC * x * x);
    let ddu = SQRT_2_OVER_PI * 6.0 * CUBIC * x;
    // d/dx [0.5(1+t) + 0.5 x sech2 du]
    sech2 * du + 0.5 * x * (-2.0 * t * sech2 * du * du + sech2 * ddu)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-5;
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let d1 = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            let d2 = (gelu_grad(x + h) - gelu_grad(x - h)) / (2.0 * h);
            assert!((d1 - gelu_grad(x)).abs() < 1e-8, "x={}", x);
            assert!((d2 - gelu_second(x)).abs() < 1e-7, "x={}", x);
        }
    }

    #[test]
    fn known_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-12);
        assert!(gelu(-10.0).abs() < 1e-12);
    }
}
