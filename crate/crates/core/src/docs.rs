//! Theory-to-code map: every theoretical result or protocol this workspace
//! implements, the operation that embodies it, and the test that checks it.
//! The rendered table ships in `docs/theory-to-code.md`; a test keeps the
//! file in sync with this source of truth.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceabilityEntry {
    /// Stable concept slug naming the result or protocol.
    pub concept: &'static str,
    /// Operation(s) implementing it.
    pub operation: &'static str,
    /// Test(s) exercising it.
    pub test: &'static str,
}

/// Concepts the implementation must cover, one entry each.
pub const REQUIRED_CONCEPTS: [&str; 26] = [
    "laplacian-smoothing-closed-form",
    "graph-laplacian-and-symmetrization",
    "self-loop-invariance",
    "signal-energy-quadratic-form",
    "energy-gradient",
    "low-pass-filter-step",
    "non-oscillation-threshold",
    "symmetric-eigendecomposition",
    "filter-convergence-rate-bound",
    "mean-projection-limit",
    "complete-and-edgeless-connectivity",
    "cycle-power-connectivity-closed-form",
    "window-path-connectivity-bounds",
    "block-vector-valued-laplacian",
    "consensus-weight-network-pd-structure",
    "reshape-and-row-norm-operators",
    "self-consensus-update",
    "cross-consensus-update",
    "multi-head-consensus",
    "rotary-position-map",
    "mechanism-runtime-scaling",
    "toy-transformer-mechanism-comparison",
    "directional-max-stable-learning-rate",
    "sgd-curvature-bound",
    "stability-probe-protocol",
    "hessian-vector-products",
];

pub fn traceability_table() -> Vec<TraceabilityEntry> {
    vec![
        TraceabilityEntry {
            concept: "laplacian-smoothing-closed-form",
            operation: "filter::laplacian_smoothing",
            test: "filter::tests::smoothing_examples, acceptance::criterion_04",
        },
        TraceabilityEntry {
            concept: "graph-laplacian-and-symmetrization",
            operation: "graph::laplacians",
            test: "graph::tests::laplacian_row_sums_zero_and_psd",
        },
        TraceabilityEntry {
            concept: "self-loop-invariance",
            operation: "graph::laplacians",
            test: "graph::tests::self_loops_leave_laplacian_unchanged",
        },
        TraceabilityEntry {
            concept: "signal-energy-quadratic-form",
            operation: "filter::energy",
            test: "filter::tests::energy_matches_quadratic_form",
        },
        TraceabilityEntry {
            concept: "energy-gradient",
            operation: "filter::energy_gradient",
            test: "filter::tests::gradient_orthogonal_to_ones_and_matches_fd",
        },
        TraceabilityEntry {
            concept: "low-pass-filter-step",
            operation: "filter::filter_step",
            test: "filter::tests::filter_step_scales_eigenvectors",
        },
        TraceabilityEntry {
            concept: "non-oscillation-threshold",
            operation: "filter::non_oscillation_threshold",
            test: "filter::tests::threshold_examples",
        },
        TraceabilityEntry {
            concept: "symmetric-eigendecomposition",
            operation: "tensor::sym_eig",
            test: "tensor::tests::sym_eig_random_reconstruction_and_trace",
        },
        TraceabilityEntry {
            concept: "filter-convergence-rate-bound",
            operation: "filter::filter_iterate",
            test: "acceptance::criterion_03_filtering_theory",
        },
        TraceabilityEntry {
            concept: "mean-projection-limit",
            operation: "filter::filter_iterate",
            test: "filter::tests::iterate_limit_is_mean_projection",
        },
        TraceabilityEntry {
            concept: "complete-and-edgeless-connectivity",
            operation: "graph::fiedler_value",
            test: "graph::tests::fiedler_complete_edgeless_path",
        },
        TraceabilityEntry {
            concept: "cycle-power-connectivity-closed-form",
            operation: "graph::cycle_power_lambda1",
            test: "acceptance::criterion_01_cycle_power_closed_form",
        },
        TraceabilityEntry {
            concept: "window-path-connectivity-bounds",
            operation: "graph::path_fiedler_bounds",
            test: "acceptance::criterion_02_window_path_bounds",
        },
        TraceabilityEntry {
            concept: "block-vector-valued-laplacian",
            operation: "graph::block_laplacian",
            test: "acceptance::criterion_07_block_laplacian",
        },
        TraceabilityEntry {
            concept: "consensus-weight-network-pd-structure",
            operation: "consensus::scwm, consensus::ccwm",
            test: "acceptance::criterion_05_consensus_correctness",
        },
        TraceabilityEntry {
            concept: "reshape-and-row-norm-operators",
            operation: "consensus::reshape_rs, consensus::row_norm_rn",
            test: "consensus::tests::reshape_rs_examples, consensus::tests::row_norm_examples",
        },
        TraceabilityEntry {
            concept: "self-consensus-update",
            operation: "consensus::self_consensus_forward",
            test: "consensus::tests::update_direction_matches_reference_and_energy_gradient",
        },
        TraceabilityEntry {
            concept: "cross-consensus-update",
            operation: "consensus::cross_consensus_forward",
            test: "consensus::tests::cross_consensus_zero_disagreement_and_empty_edges",
        },
        TraceabilityEntry {
            concept: "multi-head-consensus",
            operation: "consensus::multi_head_self_consensus, consensus::multi_head_cross_consensus",
            test: "consensus::tests::heads_update_disjoint_slices",
        },
        TraceabilityEntry {
            concept: "rotary-position-map",
            operation: "consensus::rope_rotate",
            test: "acceptance::criterion_06_rotary_position_map",
        },
        TraceabilityEntry {
            concept: "mechanism-runtime-scaling",
            operation: "consensus::self_consensus_forward, attention::self_attention_forward, attention::sliding_window_attention_forward",
            test: "acceptance::criterion_08_runtime_scaling",
        },
        TraceabilityEntry {
            concept: "toy-transformer-mechanism-comparison",
            operation: "harness::build_model, harness::lr_sweep",
            test: "acceptance::criterion_11_stability_ordering",
        },
        TraceabilityEntry {
            concept: "directional-max-stable-learning-rate",
            operation: "stability::alpha_max",
            test: "acceptance::criterion_09_alpha_max_estimator",
        },
        TraceabilityEntry {
            concept: "sgd-curvature-bound",
            operation: "stability::sgd_alpha_max_bound_check",
            test: "stability::tests::sgd_bound_holds_on_random_spd_quadratics",
        },
        TraceabilityEntry {
            concept: "stability-probe-protocol",
            operation: "stability::probe",
            test: "acceptance::criterion_10_probe_protocol",
        },
        TraceabilityEntry {
            concept: "hessian-vector-products",
            operation: "autodiff::hvp_exact, autodiff::hvp_fd",
            test: "autodiff::tests::exact_hvp_matches_fd_hvp_on_composite",
        },
    ]
}

/// Functionality intentionally not built, listed so the coverage table has a
/// clear boundary.
pub const OUT_OF_SCOPE: [&str; 6] = [
    "full-scale web-text / genome / protein training runs and their absolute losses",
    "diffusion-style noise schedules (replaced by a uniform-rate masked-token objective)",
    "multitrack protein architectures and quantized structure tokenizers",
    "external-oracle generative scoring",
    "sample text generation and unmasking schemes",
    "learned or adaptive graph construction",
];

/// Render the coverage table as markdown.
pub fn generate_traceability_table() -> String {
    let mut out = String::from("# Theory-to-code map\n\n");
    out.push_str(
        "Each row names a theoretical result or protocol implemented here, the\noperation that embodies it, and the test that checks it.\n\n",
    );
    out.push_str("| Concept | Operation | Test |\n|---|---|---|\n");
    for e in traceability_table() {
        out.push_str(&format!("| {} | `{}` | `{}` |\n", e.concept, e.operation, e.test));
    }
    out.push_str("\n## Out of scope\n\n");
    for item in OUT_OF_SCOPE {
        out.push_str(&format!("- {item}\n"));
    }
    out
}
