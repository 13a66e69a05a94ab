//! Numeric kernels: weighted lasso, relaxed least squares, logistic IRLS.

pub mod design;
pub mod lasso;
pub mod linalg;
pub mod logistic;
pub mod ols;

pub use design::{Design, SparseCol};
pub use lasso::{cv_lasso, kkt_residual, lambda_grid, lasso_fit, lasso_path, LassoFit, LassoOptions, PathPoint};
pub use logistic::{expit, l1_logistic_lambda_max, l1_logistic_path, logistic_irls, logit, LogisticFit};
pub use ols::{normal_equation_residuals, relaxed_ols, RelaxedFit};
