//! Every differentiable tape operation is held against the central
//! difference oracle on small random inputs (64-bit, eps 1e-5,
//! rel tol 1e-4, abs tol 1e-7).

use std::rc::Rc;

use m3sr_core::gradcheck::{grad_check, pack, unpack, EPS, TOL_ABS, TOL_REL};
use m3sr_core::tape::{Tape, VarId};
use m3sr_core::tensor::TensorF;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check<F>(name: &str, f: F, x: &TensorF)
where
    F: FnMut(&mut Tape, VarId) -> m3sr_core::Result<VarId>,
{
    let report = grad_check(f, x, EPS, TOL_REL, TOL_ABS).unwrap();
    assert!(
        report.passed,
        "{name}: rel {:.3e} abs {:.3e} worst {}",
        report.max_rel_err, report.max_abs_err, report.worst_index
    );
}

#[test]
fn elementwise_and_reduction_ops() {
    // seed 101
    let mut r = rng(101);
    let a = TensorF::uniform(vec![3, 4], -1.0, 1.0, &mut r);
    let b = TensorF::uniform(vec![3, 4], -1.0, 1.0, &mut r);

    let joint = pack(&[&a, &b]);
    check(
        "add+mul",
        |t, j| {
            let parts = unpack(t, j, &[vec![3, 4], vec![3, 4]])?;
            let s = t.add(parts[0], parts[1])?;
            let m = t.mul(s, parts[0])?;
            Ok(t.sum(m))
        },
        &joint,
    );

    let x = TensorF::uniform(vec![8], -2.0, 2.0, &mut r);
    check(
        "silu",
        |t, xid| {
            let y = t.silu(xid);
            Ok(t.sum(y))
        },
        &x,
    );
    check(
        "softplus",
        |t, xid| {
            let y = t.softplus(xid);
            Ok(t.sum(y))
        },
        &x,
    );

    let scale_joint = pack(&[&x, &TensorF::scalar(0.7)]);
    check(
        "scale",
        |t, j| {
            let parts = unpack(t, j, &[vec![8], vec![1]])?;
            let y = t.scale(parts[0], parts[1])?;
            Ok(t.sum(y))
        },
        &scale_joint,
    );
}

#[test]
fn structural_ops() {
    // seed 102
    let mut r = rng(102);
    let x = TensorF::uniform(vec![2, 4, 4], -1.0, 1.0, &mut r);

    let perm: Rc<Vec<u32>> = Rc::new((0..32u32).rev().collect());
    check(
        "permute+reshape+narrow",
        |t, xid| {
            let p = t.permute(xid, perm.clone(), vec![32])?;
            let q = t.reshape(p, vec![4, 8])?;
            let n = t.narrow(q, 4, vec![3, 4])?;
            // weight the slice so the gradient is not uniform
            let m = t.mul(n, n)?;
            Ok(t.sum(m))
        },
        &x,
    );

    let y = TensorF::uniform(vec![3, 2, 2], -1.0, 1.0, &mut r);
    let joint = pack(&[&x, &y]);
    check(
        "concat_first",
        |t, j| {
            let parts = unpack(t, j, &[vec![2, 4, 4], vec![3, 2, 2]])?;
            let a = t.reshape(parts[0], vec![8, 2, 2])?;
            let c = t.concat_first(&[a, parts[1]])?;
            let m = t.mul(c, c)?;
            Ok(t.sum(m))
        },
        &joint,
    );

    check(
        "pad+crop",
        |t, xid| {
            let p = t.pad_hw(xid, 5, 6)?;
            let c = t.crop_hw(p, 4, 4)?;
            let m = t.mul(c, c)?;
            Ok(t.sum(m))
        },
        &x,
    );
}

#[test]
fn linear_and_pointwise() {
    // seed 103
    let mut r = rng(103);
    let x = TensorF::uniform(vec![5, 3], -1.0, 1.0, &mut r);
    let w = TensorF::uniform(vec![4, 3], -0.7, 0.7, &mut r);
    let b = TensorF::uniform(vec![4], -0.2, 0.2, &mut r);
    let joint = pack(&[&x, &w, &b]);
    check(
        "linear",
        |t, j| {
            let p = unpack(t, j, &[vec![5, 3], vec![4, 3], vec![4]])?;
            let y = t.linear(p[0], p[1], p[2])?;
            let m = t.mul(y, y)?;
            Ok(t.sum(m))
        },
        &joint,
    );

    let x = TensorF::uniform(vec![3, 2, 4], -1.0, 1.0, &mut r);
    let w = TensorF::uniform(vec![2, 3], -0.7, 0.7, &mut r);
    let b = TensorF::uniform(vec![2], -0.2, 0.2, &mut r);
    let joint = pack(&[&x, &w, &b]);
    check(
        "pointwise",
        |t, j| {
            let p = unpack(t, j, &[vec![3, 2, 4], vec![2, 3], vec![2]])?;
            let y = t.pointwise(p[0], p[1], p[2])?;
            let m = t.mul(y, y)?;
            Ok(t.sum(m))
        },
        &joint,
    );
}

#[test]
fn convolutions() {
    // seed 104
    let mut r = rng(104);
    for stride in [1usize, 2] {
        let x = TensorF::uniform(vec![2, 4, 4], -1.0, 1.0, &mut r);
        let w = TensorF::uniform(vec![3, 2, 3, 3], -0.5, 0.5, &mut r);
        let b = TensorF::uniform(vec![3], -0.2, 0.2, &mut r);
        let joint = pack(&[&x, &w, &b]);
        check(
            &format!("conv3x3 stride {stride}"),
            |t, j| {
                let p = unpack(t, j, &[vec![2, 4, 4], vec![3, 2, 3, 3], vec![3]])?;
                let y = t.conv3x3(p[0], p[1], p[2], stride)?;
                let m = t.mul(y, y)?;
                Ok(t.sum(m))
            },
            &joint,
        );
    }

    let x = TensorF::uniform(vec![2, 3, 3], -1.0, 1.0, &mut r);
    let w = TensorF::uniform(vec![2, 2, 3, 3], -0.5, 0.5, &mut r);
    let b = TensorF::uniform(vec![2], -0.2, 0.2, &mut r);
    let joint = pack(&[&x, &w, &b]);
    check(
        "tconv3x3",
        |t, j| {
            let p = unpack(t, j, &[vec![2, 3, 3], vec![2, 2, 3, 3], vec![2]])?;
            let y = t.tconv3x3(p[0], p[1], p[2])?;
            let m = t.mul(y, y)?;
            Ok(t.sum(m))
        },
        &joint,
    );

    let x = TensorF::uniform(vec![3, 4, 4], -1.0, 1.0, &mut r);
    let w = TensorF::uniform(vec![3, 3, 3], -0.5, 0.5, &mut r);
    let b = TensorF::uniform(vec![3], -0.2, 0.2, &mut r);
    let joint = pack(&[&x, &w, &b]);
    check(
        "dwconv3x3",
        |t, j| {
            let p = unpack(t, j, &[vec![3, 4, 4], vec![3, 3, 3], vec![3]])?;
            let y = t.dwconv3x3(p[0], p[1], p[2])?;
            let m = t.mul(y, y)?;
            Ok(t.sum(m))
        },
        &joint,
    );

    // two sequences of length 4, three channels
    let x = TensorF::uniform(vec![8, 3], -1.0, 1.0, &mut r);
    let w = TensorF::uniform(vec![3, 3], -0.5, 0.5, &mut r);
    let b = TensorF::uniform(vec![3], -0.2, 0.2, &mut r);
    let joint = pack(&[&x, &w, &b]);
    check(
        "dwconv1d_causal",
        |t, j| {
            let p = unpack(t, j, &[vec![8, 3], vec![3, 3], vec![3]])?;
            let y = t.dwconv1d_causal(p[0], p[1], p[2], 2, 4)?;
            let m = t.mul(y, y)?;
            Ok(t.sum(m))
        },
        &joint,
    );
}

#[test]
fn layer_norm_and_wavelets() {
    // seed 105
    let mut r = rng(105);
    let x = TensorF::uniform(vec![3, 2, 2], -1.0, 1.0, &mut r);
    let gamma = TensorF::uniform(vec![3], 0.5, 1.5, &mut r);
    let beta = TensorF::uniform(vec![3], -0.3, 0.3, &mut r);
    let joint = pack(&[&x, &gamma, &beta]);
    check(
        "layer_norm_chw",
        |t, j| {
            let p = unpack(t, j, &[vec![3, 2, 2], vec![3], vec![3]])?;
            let y = t.layer_norm_chw(p[0], p[1], p[2])?;
            let m = t.mul(y, y)?;
            Ok(t.sum(m))
        },
        &joint,
    );

    let x = TensorF::uniform(vec![2, 4, 4], -1.0, 1.0, &mut r);
    check(
        "dwt2+idwt2",
        |t, xid| {
            let sb = t.dwt2(xid)?;
            let m = t.mul(sb, sb)?;
            let back = t.idwt2(m)?;
            let q = t.mul(back, back)?;
            Ok(t.sum(q))
        },
        &x,
    );
}

#[test]
fn selective_scan() {
    // seed 106; batch 2, len 3, dim 2, state 3
    let mut r = rng(106);
    let (batch, len, dim, state) = (2usize, 3usize, 2usize, 3usize);
    let rows = batch * len;
    let u = TensorF::uniform(vec![rows, dim], -1.0, 1.0, &mut r);
    let dt_raw = TensorF::uniform(vec![rows, dim], -2.0, 0.5, &mut r);
    let bs = TensorF::uniform(vec![rows, state], -1.0, 1.0, &mut r);
    let cs = TensorF::uniform(vec![rows, state], -1.0, 1.0, &mut r);
    let a = TensorF::from_vec(vec![dim, state], vec![-1.0, -2.0, -3.0, -0.5, -1.5, -2.5]).unwrap();
    let d_skip = TensorF::uniform(vec![dim], 0.5, 1.5, &mut r);

    let shapes = [
        vec![rows, dim],
        vec![rows, dim],
        vec![rows, state],
        vec![rows, state],
        vec![dim, state],
        vec![dim],
    ];
    let joint = pack(&[&u, &dt_raw, &bs, &cs, &a, &d_skip]);
    check(
        "scan with skip",
        |t, j| {
            let p = unpack(t, j, &shapes)?;
            let dt = t.softplus(p[1]);
            let y = t.scan(p[0], dt, p[2], p[3], p[4], Some(p[5]), batch, len)?;
            let m = t.mul(y, y)?;
            Ok(t.sum(m))
        },
        &joint,
    );
    check(
        "scan without skip",
        |t, j| {
            let p = unpack(t, j, &shapes)?;
            let dt = t.softplus(p[1]);
            let y = t.scan(p[0], dt, p[2], p[3], p[4], None, batch, len)?;
            let m = t.mul(y, y)?;
            Ok(t.sum(m))
        },
        &joint,
    );

    // a crossing zero exercises the series branch of the gain and its
    // derivative
    let a_near_zero =
        TensorF::from_vec(vec![dim, state], vec![-1e-7, 1e-6, -2.0, 0.0, -1e-9, -0.8]).unwrap();
    let joint = pack(&[&u, &dt_raw, &bs, &cs, &a_near_zero, &d_skip]);
    check(
        "scan near-zero a",
        |t, j| {
            let p = unpack(t, j, &shapes)?;
            let dt = t.softplus(p[1]);
            let y = t.scan(p[0], dt, p[2], p[3], p[4], Some(p[5]), batch, len)?;
            let m = t.mul(y, y)?;
            Ok(t.sum(m))
        },
        &joint,
    );
}

#[test]
fn mae_loss() {
    // seed 107; keep differences away from the |.| kink
    let mut r = rng(107);
    let a = TensorF::uniform(vec![2, 3], 0.5, 1.0, &mut r);
    let b = TensorF::uniform(vec![2, 3], -1.0, -0.5, &mut r);
    let joint = pack(&[&a, &b]);
    check(
        "mae",
        |t, j| {
            let p = unpack(t, j, &[vec![2, 3], vec![2, 3]])?;
            t.mae(p[0], p[1])
        },
        &joint,
    );
}
