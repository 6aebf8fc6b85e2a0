//! Synthetic colored-shape scenes, their rasterizer, and a blob detector
//! that maps images back to symbolic scenes.

mod dataset;
mod detect;
mod scene;

pub use dataset::{export_dataset, load_dataset, DatasetIndex, Example};
pub use detect::{
    detect, quantize, recovers, Blob, Detection, ShapeClass, ShapeFeatures, COLOR_THRESHOLD,
    MIN_BLOB_PIXELS,
};
pub use scene::{
    generate_scene, place_objects, render, Scene, SceneObject, CANVAS, MAX_RADIUS, MIN_RADIUS,
};
