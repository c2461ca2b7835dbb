//! Toolkit for landmark-based face morphing attack generation, detector
//! training, and ISO-style evaluation. The library covers the full desk-scale
//! pipeline: frontal filtering and similarity-based pairing, Delaunay-warp
//! morph generation with simulated re-digitization, identity-disjoint dataset
//! splits, the pixel-wise supervised detector plus classic baselines, and
//! APCER/BPCER/MMPMR metrics with report and plot emission.

pub mod baselines;
pub mod datakit;
pub mod metrics;
pub mod morphgen;
pub mod nn;
pub mod pwmad;
pub mod runner;
pub mod scoring;
pub mod synth;
pub mod trainkit;
