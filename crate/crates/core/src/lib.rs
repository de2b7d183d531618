//! Relative positional encoding kernels and the numerics around them:
//! bias series convergence, theoretical and empirical receptive fields,
//! and causal windowed attention with bias.

pub mod attention;
pub mod kernel;
pub mod matrix;
pub mod receptive_field;
pub mod scalar;
pub mod series;

pub use attention::{AttentionError, AttentionInstance, DeltaCell, TilingMode, TilingResult, WindowedOutput};
pub use kernel::{catalog, classification_configurations, KernelError, KernelName, RpeKernel};
pub use matrix::Matrix;
pub use receptive_field::{
    compare_trf, draw_curve, erf, mean_erf, trf, FieldError, FieldKind, ReceptiveFieldCurve, TheoreticalField,
    TrfComparison,
};
pub use scalar::Scalar;
pub use series::{
    analytic_verdict, classify, partial_sums, raabe_statistic, AnalyticVerdict, BiasSeries, ConvergenceVerdict,
    CustomSeries, LimitEstimate, LimitKind, NumericVerdict, PartialSumTable, SeriesError,
};

pub type Kernel = RpeKernel<f64>;
pub type Kernel32 = RpeKernel<f32>;
pub type Attention = AttentionInstance<f64>;
pub type Attention32 = AttentionInstance<f32>;
