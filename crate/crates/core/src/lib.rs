//! Satellite-thermal geo-localization core.
//!
//! Pipeline pieces, in dependency order: raster loading and tiling
//! ([`geodata`]), procedural paired worlds for desk-scale runs ([`synthmap`]),
//! thermal contrast enhancement ([`enhance`]), the conditional thermal
//! generator ([`tgm`]), the cross-modal embedding model and its losses
//! ([`sgm`]), partial triplet mining ([`mining`]), the exact descriptor index
//! ([`retrieval`]), and recall/error metrics ([`evalkit`]).

pub mod checkpoint;
pub mod enhance;
pub mod evalkit;
pub mod geodata;
pub mod imagebuf;
pub mod mining;
pub mod nn;
pub mod retrieval;
pub mod sgm;
pub mod synthmap;
pub mod tgm;
