//! Differentiable Gaussian splatting: camera model, EWA projection,
//! compositing, photometric losses and image I/O.

pub mod camera;
pub mod image;
pub mod loss;
pub mod raster;

pub use camera::Camera;
pub use image::Image;
pub use loss::{loss_l1, loss_l1_grad, loss_mask, loss_mask_grad, loss_ssim, loss_ssim_grad, psnr, ssim};
pub use raster::{backward, project, rasterize, PrimitiveGrad, Projection, ProjectionOutcome, RenderOutput, SplatPrimitive};

#[cfg(test)]
mod tests;
