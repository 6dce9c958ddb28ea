use std::path::Path;

use flgc_core::data::{load_mnist, Split};
use flgc_core::exec::run_plan;
use flgc_core::plan::compile;
use flgc_core::checkpoint;

#[test]
fn debug_plan_vs_model() {
    let model = checkpoint::load(Path::new("/tmp/verify-drive/ckpt")).unwrap();
    let data = load_mnist(Path::new("/tmp/verify-drive/probe-data"), Split::Test).unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let (x, labels) = data.batch(&idx).unwrap();

    let a = model.forward_eval(&x).unwrap();
    let dense = model.to_masked_dense().unwrap();
    let b = dense.forward_eval(&x).unwrap();
    let plan = compile(&model).unwrap();
    let c = run_plan(&plan, &x).unwrap();

    println!("labels: {labels:?}");
    println!("model vs masked-dense max abs: {}", a.max_abs_diff(&b));
    println!("model vs plan        max abs: {}", a.max_abs_diff(&c));
    let row = |t: &flgc_core::Tensor<f32>, i: usize| {
        let d = &t.data()[i * 10..(i + 1) * 10];
        d.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).map(|(j, _)| j).unwrap()
    };
    let am: Vec<usize> = (0..16).map(|i| row(&a, i)).collect();
    let cm: Vec<usize> = (0..16).map(|i| row(&c, i)).collect();
    println!("model argmax: {am:?}");
    println!("plan  argmax: {cm:?}");

    let loaded = flgc_core::plan::load_plan(Path::new("/tmp/verify-drive/plan")).unwrap();
    let d = run_plan(&loaded, &x).unwrap();
    println!("model vs loaded-plan max abs: {}", a.max_abs_diff(&d));
    let dm: Vec<usize> = (0..16).map(|i| row(&d, i)).collect();
    println!("loaded plan argmax: {dm:?}");
    println!("in-memory ops: {:?}", plan.ops.iter().map(|o| o.kind()).collect::<Vec<_>>());
    println!("loaded    ops: {:?}", loaded.ops.iter().map(|o| o.kind()).collect::<Vec<_>>());
}
