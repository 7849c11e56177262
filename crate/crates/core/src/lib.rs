//! Fitting layered 2.5D cartoon puppets to images.
//!
//! A [`puppet::Puppet`] is a set of triangle meshes stacked in draw order and
//! tied together by hinge joints. A small encoder/decoder network
//! ([`model`]) maps an image to per-vertex offsets of the puppet; the
//! deformed puppet is rasterized ([`render`]) and compared with the image, and
//! the reconstruction error is back-propagated through the renderer and the
//! network ([`autodiff`]) together with rigidity and joint regularizers
//! ([`energies`]). Once trained ([`train`]), the latent space supports
//! inbetweening, constrained posing and correspondence estimation
//! ([`apps`]).

pub mod apps;
pub mod autodiff;
pub mod energies;
pub mod error;
pub mod geom;
pub mod image;
pub mod model;
pub mod puppet;
pub mod render;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use geom::Point2;
pub use image::Image;
pub use puppet::{ControlPoint, DeformState, Puppet};
