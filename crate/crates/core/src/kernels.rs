//! Raw convolution kernels shared by the tape's forward and backward passes.

use crate::scalar::Scalar;

/// Static geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    /// Rows of the unfolded input matrix for one group.
    pub fn patch(&self) -> usize {
        self.cin_g() * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds channels `[c0, c0 + cin_g)` of one image into a
/// `(cin_g·k·k) × (ho·wo)` matrix.
fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], c0: usize, cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let out_plane = g.ho * g.wo;
    for ci in 0..g.cin_g() {
        let src = &img[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * out_plane..(row + 1) * out_plane];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back into an image.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], c0: usize, img: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let out_plane = g.ho * g.wo;
    for ci in 0..g.cin_g() {
        let dst = &mut img[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * out_plane..(row + 1) * out_plane];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] = drow[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let in_img = g.c_in * g.h * g.w;
    let out_plane = g.ho * g.wo;
    let out_img = g.c_out * out_plane;
    let (cin_g, cout_g, patch) = (g.cin_g(), g.cout_g(), g.patch());
    let mut y = vec![T::zero(); g.n * out_img];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * out_plane]
    };
    for n in 0..g.n {
        let img = &x[n * in_img..(n + 1) * in_img];
        for grp in 0..g.groups {
            let c0 = grp * cin_g;
            let lhs: &[T] = if g.is_pointwise() {
                &img[c0 * out_plane..(c0 + cin_g) * out_plane]
            } else {
                im2col(g, img, c0, &mut cols);
                &cols
            };
            let wg = &w[grp * cout_g * patch..(grp + 1) * cout_g * patch];
            let o0 = n * out_img + grp * cout_g * out_plane;
            let yg = &mut y[o0..o0 + cout_g * out_plane];
            T::gemm(cout_g, patch, out_plane, wg, false, lhs, false, yg, false);
        }
        if let Some(b) = b {
            for (co, &bv) in b.iter().enumerate() {
                let o0 = n * out_img + co * out_plane;
                y[o0..o0 + out_plane].iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    y
}

/// Gradients of a convolution. Each `Option` buffer is accumulated into
/// only when present.
pub fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let in_img = g.c_in * g.h * g.w;
    let out_plane = g.ho * g.wo;
    let out_img = g.c_out * out_plane;
    let (cin_g, cout_g, patch) = (g.cin_g(), g.cout_g(), g.patch());
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); patch * out_plane]
    };
    let mut dcols = if pointwise || dx.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); patch * out_plane]
    };
    for n in 0..g.n {
        let img = &x[n * in_img..(n + 1) * in_img];
        for grp in 0..g.groups {
            let c0 = grp * cin_g;
            let o0 = n * out_img + grp * cout_g * out_plane;
            let dyg = &dy[o0..o0 + cout_g * out_plane];
            let wg = &w[grp * cout_g * patch..(grp + 1) * cout_g * patch];
            if let Some(dw) = dw.as_deref_mut() {
                let lhs: &[T] = if pointwise {
                    &img[c0 * out_plane..(c0 + cin_g) * out_plane]
                } else {
                    im2col(g, img, c0, &mut cols);
                    &cols
                };
                let dwg = &mut dw[grp * cout_g * patch..(grp + 1) * cout_g * patch];
                T::gemm(cout_g, out_plane, patch, dyg, false, lhs, true, dwg, true);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dimg = &mut dx[n * in_img..(n + 1) * in_img];
                if pointwise {
                    let dst = &mut dimg[c0 * out_plane..(c0 + cin_g) * out_plane];
                    T::gemm(patch, cout_g, out_plane, wg, true, dyg, false, dst, true);
                } else {
                    T::gemm(patch, cout_g, out_plane, wg, true, dyg, false, &mut dcols, false);
                    col2im(g, &dcols, c0, dimg);
                }
            }
        }
    }
    if let Some(db) = db {
        for n in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let o0 = n * out_img + co * out_plane;
                *acc = *acc + dy[o0..o0 + out_plane].iter().copied().sum::<T>();
            }
        }
    }
}
