//! Property tests for the storage formats and scalar kernels.

use proptest::collection::vec;
use proptest::prelude::*;

use squeeze::packed::{pack_mixed, ConfigEcho, PackedModel};
use squeeze::quant::{
    compute_uniform_params, dequantize_value, quantize_value, BinParams, BinarizeMode, QuantParams,
};
use squeeze::config::SupervisionMode;
use squeeze::tensor::{Tensor, TensorContainer};

fn finite_f32() -> impl Strategy<Value = f32> {
    (-1.0e6f32..1.0e6).prop_map(|v| if v == 0.0 { 0.0 } else { v })
}

proptest! {
    /// Containers reload bit-identically.
    #[test]
    fn container_round_trip(
        rows in 1usize..6,
        cols in 1usize..6,
        seedable in vec(finite_f32(), 36),
    ) {
        let data: Vec<f32> = seedable.iter().take(rows * cols).copied().collect();
        let mut c = TensorContainer::new();
        c.insert(Tensor::new("a", rows, cols, data.clone()).unwrap()).unwrap();
        let back = TensorContainer::from_bytes(&c.to_bytes()).unwrap();
        let t = back.get("a").unwrap();
        prop_assert_eq!(t.shape(), [rows, cols]);
        for (x, y) in t.data().iter().zip(&data) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
        // saving what we loaded reproduces the bytes
        prop_assert_eq!(back.to_bytes(), c.to_bytes());
    }

    /// In-range values reconstruct within half a step.
    #[test]
    fn quant_round_trip_bound(
        row in vec(-10.0f32..10.0, 1..64),
        k in 2u8..=8,
    ) {
        let p = compute_uniform_params(&row, k).unwrap();
        prop_assert!(p.s > 0.0);
        prop_assert!(p.z <= p.max_code());
        for &w in &row {
            let code = quantize_value(w as f64, &p);
            prop_assert!(code <= p.max_code());
            let back = dequantize_value(code, &p);
            let bound = p.s as f64 / 2.0 + 1e-6;
            prop_assert!(((w - back) as f64).abs() <= bound,
                "w={} back={} bound={} params={:?}", w, back, bound, p);
        }
    }

    /// Packing then unpacking reproduces the dequantized dense matrix
    /// exactly, and the serialized form survives a round trip byte-for-byte.
    #[test]
    fn pack_unpack_identity(
        d_out in 1usize..6,
        d_in in 1usize..6,
        k in 2u8..=8,
        mask_bits in vec(any::<bool>(), 36),
        code_pool in vec(0u8..=255, 36),
        sign_pool in vec(any::<bool>(), 36),
        s in 0.001f32..4.0,
        alpha in 0.0f32..2.0,
    ) {
        let n = d_out * d_in;
        let mask: Vec<bool> = mask_bits.iter().take(n).copied().collect();
        let max = ((1u16 << k) - 1) as u8;
        let salient = mask.iter().filter(|&&m| m).count();
        let codes: Vec<u8> = code_pool
            .iter()
            .take(salient)
            .map(|&c| (c as u16 % (max as u16 + 1)) as u8)
            .collect();
        let signs: Vec<i8> = sign_pool.iter().take(n - salient)
            .map(|&b| if b { 1 } else { -1 }).collect();
        let qp = QuantParams { k, s, z: max / 2 };
        let bp = BinParams { alpha, mode: BinarizeMode::ScaledSign };
        let layer = pack_mixed(
            "p", d_out, d_in, mask, codes.clone(), signs.clone(),
            vec![qp; d_out], vec![bp; d_out], false,
            ConfigEcho { ratio: 0.5, lambda: 0.0, supervision: SupervisionMode::Fias },
        ).unwrap();

        // direct dequantization oracle
        let mut expect = Vec::with_capacity(n);
        let mut ci = codes.iter();
        let mut si = signs.iter();
        for &m in &layer.mask {
            expect.push(if m {
                dequantize_value(*ci.next().unwrap(), &qp)
            } else if *si.next().unwrap() > 0 { alpha } else { -alpha });
        }
        prop_assert_eq!(layer.dense().unwrap(), expect);

        let model = PackedModel { layers: vec![layer] };
        let bytes = model.to_bytes();
        let back = PackedModel::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    /// Payload bits are a convex combination of 1 and k.
    #[test]
    fn payload_bits_bounds(
        d_out in 1usize..5,
        d_in in 1usize..5,
        mask_bits in vec(any::<bool>(), 25),
    ) {
        let n = d_out * d_in;
        let mask: Vec<bool> = mask_bits.iter().take(n).copied().collect();
        let salient = mask.iter().filter(|&&m| m).count();
        let qp = QuantParams { k: 4, s: 1.0, z: 0 };
        let bp = BinParams { alpha: 1.0, mode: BinarizeMode::BareSign };
        let layer = pack_mixed(
            "b", d_out, d_in, mask, vec![0; salient],
            vec![-1; n - salient], vec![qp; d_out], vec![bp; d_out], false,
            ConfigEcho { ratio: 0.0, lambda: 0.0, supervision: SupervisionMode::Fias },
        ).unwrap();
        let bits = layer.mean_bits().payload_bits;
        prop_assert!((1.0..=4.0).contains(&bits));
    }
}
