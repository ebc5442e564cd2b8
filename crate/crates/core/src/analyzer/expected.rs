//! Reference values for the four presets, used by `--paper-check` and tests.

/// Weight counts per the closed-form formulas.
#[derive(Debug, Clone, Copy)]
pub struct ExpectedWeights {
    pub qp_per_layer: u64,
    pub kv_per_layer: u64,
    pub ffn_per_layer: u64,
    pub embed_total: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct ExpectedCosts {
    pub eliminated: u64,
    pub reads_without_b1: u64,
    pub reads_with_b1: u64,
    /// `(batch, rounded reduction factor)`
    pub factors: [(u64, u64); 4],
    pub embed_increase: u64,
    pub abs_delta: i64,
    pub rel_delta_pct: i64,
}

#[derive(Debug, Clone, Copy)]
pub struct Expectation {
    pub preset: &'static str,
    pub weights: Option<ExpectedWeights>,
    pub costs: Option<ExpectedCosts>,
}

pub const EXPECTATIONS: [Expectation; 4] = [
    Expectation {
        preset: "pythia-6.9b",
        weights: Some(ExpectedWeights {
            qp_per_layer: 33_554_432,
            kv_per_layer: 33_554_432,
            ffn_per_layer: 134_217_728,
            embed_total: 412_876_800,
            total: 6_855_327_744,
        }),
        costs: Some(ExpectedCosts {
            eliminated: 184_549_376,
            reads_without_b1: 184_553_472,
            reads_with_b1: 16_384,
            factors: [(1, 11_264), (16, 704), (256, 44), (1024, 11)],
            embed_increase: 619_315_200,
            abs_delta: 434_765_824,
            rel_delta_pct: 6,
        }),
    },
    Expectation {
        preset: "mistral-7b",
        weights: Some(ExpectedWeights {
            qp_per_layer: 33_554_432,
            kv_per_layer: 8_388_608,
            ffn_per_layer: 117_440_512,
            embed_total: 262_144_000,
            total: 5_362_417_664,
        }),
        costs: Some(ExpectedCosts {
            eliminated: 25_165_824,
            reads_without_b1: 25_169_920,
            reads_with_b1: 10_240,
            factors: [(1, 2_458), (16, 154), (256, 10), (1024, 3)],
            embed_increase: 196_608_000,
            abs_delta: 171_442_176,
            rel_delta_pct: 3,
        }),
    },
    Expectation {
        preset: "mixtral-8x7b",
        weights: Some(ExpectedWeights {
            qp_per_layer: 33_554_432,
            kv_per_layer: 8_388_608,
            ffn_per_layer: 939_524_096,
            embed_total: 262_144_000,
            total: 31_669_092_352,
        }),
        costs: None,
    },
    Expectation {
        preset: "mixtral-8x7b-parallel",
        weights: None,
        costs: Some(ExpectedCosts {
            eliminated: 964_689_920,
            reads_without_b1: 964_694_016,
            reads_with_b1: 10_240,
            factors: [(1, 94_208), (16, 5_888), (256, 368), (1024, 92)],
            embed_increase: 196_608_000,
            abs_delta: -768_081_920,
            rel_delta_pct: -2,
        }),
    },
];

pub fn expectation(preset: &str) -> Option<&'static Expectation> {
    EXPECTATIONS.iter().find(|e| e.preset == preset)
}
