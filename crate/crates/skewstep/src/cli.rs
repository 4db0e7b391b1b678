//! Experiment configuration and command implementations (placeholder).
