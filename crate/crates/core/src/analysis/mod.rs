//! Off-line analysis: histograms, ratio estimates, model fits and scan reports.

pub mod estimate;
pub mod fit;
pub mod histogram;
pub mod kernel;
pub mod scan;

pub use estimate::{estimate_p12, P12Estimate, P12Reading, PlateauRange};
pub use fit::{fit_coincidence_model, FitOptions, FitResult};
pub use histogram::{coincidence_histogram, coincidence_histogram_ticks, CoincidenceAccumulator, CoincidenceHistogram};
pub use kernel::DipKernel;
pub use scan::{angle_scan_summary, evaluate_ch, AnglePoint, ChEvaluation, ChSettings, MeasuredCurve, Pchip, ScanReport, ScanRow};
