mod conv;
mod elementwise;
mod loss;
mod matmul;
mod modulate;
mod norm;
mod resize;
mod shape;

pub use resize::bilinear_resize_raw;
