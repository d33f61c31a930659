//! Runs in its own process so the global read counter sees no other test.

use dpkfc::data::{dataset_reads, gen_blobs, BlobsSpec};
use dpkfc::kfac::{refresh, KfacConfig};
use dpkfc::linalg::Rng;
use dpkfc::nn::{Activation, LayerSpec, Model};

#[test]
fn synthetic_refresh_touches_no_data() {
    let layers = vec![
        LayerSpec::Conv2d {
            c_in: 1,
            c_out: 4,
            k: 3,
            stride: 2,
            pad: 1,
            bias: true,
        },
        LayerSpec::Activation {
            kind: Activation::Relu,
        },
        LayerSpec::Flatten,
        LayerSpec::Linear {
            d_in: 64,
            d_out: 3,
            bias: true,
        },
    ];
    let model = Model::new(layers, vec![1, 8, 8], &mut Rng::new(0)).unwrap();
    let before = dataset_reads();
    refresh(&model, &KfacConfig::default(), 0, &mut Rng::new(1)).unwrap();
    assert_eq!(dataset_reads(), before);

    // the counter itself is live
    let ds = gen_blobs(&BlobsSpec {
        n: 10,
        dim: 3,
        classes: 2,
        noise: 0.1,
        seed: 0,
    })
    .unwrap();
    ds.batch(&[0, 1]);
    assert!(dataset_reads() > before);
}
