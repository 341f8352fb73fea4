//! Synthetic PDE tasks: reference solvers, random input fields, datasets
//! and field error metrics.

mod dataset;
mod fields;
mod metrics;
mod solvers;

pub use dataset::{
    make_dataset, sample_seed, splitmix64, DatasetManifest, Normalization, OperatorDataset, PointSet, Task,
    ADVECTION_SHIFT, DARCY_HIGH, DARCY_LOW, FIELD_LENGTH_SCALE, NORMALIZATION_FILE,
};
pub use fields::{sample_smooth_field, sample_smooth_field_2d, SmoothField1d, SmoothField2d, DEFAULT_MAX_MODE};
pub use metrics::{grad_metric_lg, mse, relative_l2};
pub use solvers::{
    green_kernel_1d_poisson, interior_grid_1d, poisson_1d_solution, solve_darcy_2d, spectral_shift,
    DarcyOperator, DARCY_CG_TOL, DARCY_MAX_N,
};
