//! Dense symmetric-indefinite `L D L^T` factorization with Bunch-Kaufman
//! pivoting. Besides solving, it reports the inertia of the matrix, which the
//! interior-point solver uses to decide how much to regularize its KKT
//! system.

/// Number of positive, negative and zero eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

#[derive(Debug, Clone, Copy)]
enum Block {
    One(f64),
    /// 2x2 block `[[a, b], [b, c]]` occupying this row and the next.
    Two(f64, f64, f64),
    /// Second row of a 2x2 block.
    Tail,
}

/// Factorization `P^T A P = L D L^T`, `L` unit lower triangular, `D` block
/// diagonal with 1x1 and 2x2 blocks.
#[derive(Debug, Clone)]
pub struct Ldlt {
    n: usize,
    /// Row-major; strictly lower part holds `L`.
    l: Vec<f64>,
    blocks: Vec<Block>,
    /// Row swapped with row `k` at step `k` (identity if equal).
    swaps: Vec<usize>,
    inertia: Inertia,
}

const BK_ALPHA: f64 = 0.640_388_203_202_208; // (1 + sqrt(17)) / 8

impl Ldlt {
    /// Factors the symmetric matrix `a` (row-major `n x n`; only symmetry of
    /// the input is assumed, both triangles are read).
    pub fn factor(mut a: Vec<f64>, n: usize) -> Self {
        assert_eq!(a.len(), n * n);
        // zero pivots are judged against the magnitude of their own original
        // row, so badly scaled but nonsingular systems keep their inertia
        let mut row_scale: Vec<f64> = (0..n)
            .map(|i| a[i * n..(i + 1) * n].iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect();
        let mut tols = vec![0.0; n];
        let mut blocks = vec![Block::Tail; n];
        let mut swaps: Vec<usize> = (0..n).collect();
        let at = |i: usize, j: usize| i * n + j;

        let sym_swap = |a: &mut Vec<f64>, p: usize, q: usize| {
            if p == q {
                return;
            }
            for j in 0..n {
                a.swap(at(p, j), at(q, j));
            }
            for i in 0..n {
                a.swap(at(i, p), at(i, q));
            }
        };

        let mut k = 0;
        while k < n {
            let absakk = a[at(k, k)].abs();
            let (imax, colmax) = ((k + 1)..n)
                .map(|i| (i, a[at(i, k)].abs()))
                .fold((k, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            let mut step = 1;
            let mut kp = k;
            if absakk.max(colmax) > 0.0 && absakk < BK_ALPHA * colmax {
                let rowmax = (k..n)
                    .filter(|&j| j != imax)
                    .map(|j| a[at(imax, j)].abs())
                    .fold(0.0, f64::max);
                if absakk >= BK_ALPHA * colmax * (colmax / rowmax) {
                    kp = k;
                } else if a[at(imax, imax)].abs() >= BK_ALPHA * rowmax {
                    kp = imax;
                } else {
                    kp = imax;
                    step = 2;
                }
            }
            let kk = k + step - 1;
            swaps[kk] = kp;
            sym_swap(&mut a, kk, kp);
            row_scale.swap(kk, kp);
            for j in k..k + step {
                tols[j] = 1e-13 * row_scale[j].max(f64::MIN_POSITIVE);
            }

            if step == 1 {
                let d = a[at(k, k)];
                blocks[k] = Block::One(d);
                if d.abs() > 0.0 {
                    for i in (k + 1)..n {
                        let lik = a[at(i, k)] / d;
                        for j in (k + 1)..=i {
                            let v = a[at(i, j)] - lik * a[at(j, k)];
                            a[at(i, j)] = v;
                            a[at(j, i)] = v;
                        }
                    }
                    for i in (k + 1)..n {
                        a[at(i, k)] /= d;
                    }
                } else {
                    for i in (k + 1)..n {
                        a[at(i, k)] = 0.0;
                    }
                }
            } else {
                let (d11, d21, d22) = (a[at(k, k)], a[at(k + 1, k)], a[at(k + 1, k + 1)]);
                let det = d11 * d22 - d21 * d21;
                blocks[k] = Block::Two(d11, d21, d22);
                blocks[k + 1] = Block::Tail;
                // inverse of the 2x2 block
                let (i11, i21, i22) = (d22 / det, -d21 / det, d11 / det);
                for i in (k + 2)..n {
                    let (ai1, ai2) = (a[at(i, k)], a[at(i, k + 1)]);
                    let (li1, li2) = (ai1 * i11 + ai2 * i21, ai1 * i21 + ai2 * i22);
                    for j in (k + 2)..=i {
                        let (aj1, aj2) = (a[at(j, k)], a[at(j, k + 1)]);
                        let v = a[at(i, j)] - li1 * aj1 - li2 * aj2;
                        a[at(i, j)] = v;
                        a[at(j, i)] = v;
                    }
                }
                for i in (k + 2)..n {
                    let (ai1, ai2) = (a[at(i, k)], a[at(i, k + 1)]);
                    a[at(i, k)] = ai1 * i11 + ai2 * i21;
                    a[at(i, k + 1)] = ai1 * i21 + ai2 * i22;
                }
                a[at(k + 1, k)] = 0.0;
            }
            k += step;
        }

        let mut inertia = Inertia {
            positive: 0,
            negative: 0,
            zero: 0,
        };
        for (k, b) in blocks.iter().enumerate() {
            match *b {
                Block::One(d) => {
                    if d.abs() <= tols[k] {
                        inertia.zero += 1;
                    } else if d > 0.0 {
                        inertia.positive += 1;
                    } else {
                        inertia.negative += 1;
                    }
                }
                Block::Two(p, q, r) => {
                    let det = p * r - q * q;
                    let tol = tols[k].max(tols[k + 1]);
                    if det.abs() <= tol * tol.max(p.abs().max(r.abs())) {
                        inertia.zero += 1;
                        if p + r > 0.0 {
                            inertia.positive += 1;
                        } else {
                            inertia.negative += 1;
                        }
                    } else if det < 0.0 {
                        inertia.positive += 1;
                        inertia.negative += 1;
                    } else if p + r > 0.0 {
                        inertia.positive += 2;
                    } else {
                        inertia.negative += 2;
                    }
                }
                Block::Tail => {}
            }
        }
        Self {
            n,
            l: a,
            blocks,
            swaps,
            inertia,
        }
    }

    pub fn inertia(&self) -> Inertia {
        self.inertia
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for k in 0..n {
            x.swap(k, self.swaps[k]);
        }
        // L y = b, exploiting that L is zero inside 2x2 blocks
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.l[i * n + j] * x[j];
            }
            x[i] = s;
        }
        let mut k = 0;
        while k < n {
            match self.blocks[k] {
                Block::One(d) => {
                    x[k] = if d != 0.0 { x[k] / d } else { 0.0 };
                    k += 1;
                }
                Block::Two(p, q, r) => {
                    let det = p * r - q * q;
                    let (b1, b2) = (x[k], x[k + 1]);
                    x[k] = (r * b1 - q * b2) / det;
                    x[k + 1] = (p * b2 - q * b1) / det;
                    k += 2;
                }
                Block::Tail => unreachable!("tail handled with its head"),
            }
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= self.l[j * n + i] * x[j];
            }
            x[i] = s;
        }
        for k in (0..n).rev() {
            x.swap(k, self.swaps[k]);
        }
        x
    }
}
