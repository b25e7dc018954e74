//! Role-keyed parameter storage inside an archive.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveReader, ArchiveWriter};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"ASLCKPT\0";

/// Network roles. `G` maps source to color, `G_Y` maps color back to
/// source (unpaired only), `D` judges color images, `D_X` source images,
/// `D_B` / `D_M` binary and multi-class segmentation maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "G")]
    G,
    #[serde(rename = "G_Y")]
    GY,
    #[serde(rename = "D")]
    D,
    #[serde(rename = "D_X")]
    DX,
    #[serde(rename = "D_B")]
    DB,
    #[serde(rename = "D_M")]
    DM,
}

impl Role {
    pub const ALL: [Role; 6] = [Role::G, Role::GY, Role::D, Role::DX, Role::DB, Role::DM];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::G => "G",
            Role::GY => "G_Y",
            Role::D => "D",
            Role::DX => "D_X",
            Role::DB => "D_B",
            Role::DM => "D_M",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stores every parameter of `module` under `<prefix>/<param name>`.
pub fn write_module<T: Scalar, M: Module<T> + ?Sized>(w: &mut ArchiveWriter, prefix: &str, module: &M) {
    for p in module.params() {
        w.tensor(format!("{prefix}/{}", p.name()), p.value());
    }
}

/// Overwrites the parameters of `module` from `<prefix>/...` entries.
pub fn read_module<T: Scalar, M: Module<T> + ?Sized>(r: &ArchiveReader, prefix: &str, module: &mut M) -> Result<()> {
    for p in module.params_mut() {
        let key = format!("{prefix}/{}", p.name());
        let t = r.tensor::<T>(&key)?;
        if t.shape() != p.value().shape() {
            return Err(Error::Checkpoint(format!(
                "{key}: stored shape {:?}, network expects {:?}",
                t.shape(),
                p.value().shape()
            )));
        }
        *p.value_mut() = t;
    }
    Ok(())
}
