//! Initial residency of every partition.

use serde::{Deserialize, Serialize};

use crate::costmodel::ChipConfig;
use crate::error::{Error, Result};
use crate::rtensor::Partitioning;

/// One resident window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedPartition {
    pub slot: usize,
    pub tensor: String,
    /// Sub-tensor coordinates.
    pub block: Vec<usize>,
    /// Window start inside the sub-tensor, per dimension.
    pub start: Vec<usize>,
    pub window: Vec<usize>,
    /// Byte offset in the core's arena; the shift buffer sits at 0.
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub cores: Vec<Vec<PlacedPartition>>,
    pub shift_buffer: u64,
}

impl Placement {
    pub fn bytes(&self, core: usize) -> u64 {
        self.shift_buffer + self.cores[core].iter().map(|p| p.bytes).sum::<u64>()
    }

    pub fn partition(&self, core: usize, slot: usize) -> &PlacedPartition {
        self.cores[core]
            .iter()
            .find(|p| p.slot == slot)
            .expect("every slot is placed on every core")
    }

    /// Global padded indices held by `core` for `slot`, per dimension.
    pub fn indices(&self, p: &Partitioning, core: usize, slot: usize) -> Vec<Vec<usize>> {
        let part = self.partition(core, slot);
        let c = &p.configs[slot];
        let origin = p.block_origin(slot, &p.core_coords(core));
        (0..part.window.len())
            .map(|d| {
                (0..part.window[d])
                    .map(|i| origin[d] + (part.start[d] + i) % c.sub_shape[d])
                    .collect()
            })
            .collect()
    }

    /// Cores holding the padded element `index` of `slot`.
    pub fn holders(&self, p: &Partitioning, slot: usize, index: &[usize]) -> Vec<usize> {
        (0..self.cores.len())
            .filter(|&core| {
                self.indices(p, core, slot)
                    .iter()
                    .zip(index)
                    .all(|(set, i)| set.contains(i))
            })
            .collect()
    }
}

/// Assign every core its output partition and the operand windows its
/// first sub-task needs. Rotating windows start at the core's tile offset:
/// the sum over rotating tensors of ring position times window length.
/// This is the skew produced by placing the first rotating tensor along
/// its rings and inferring the rest from step-0 dependencies.
pub fn place(p: &Partitioning, chip: &ChipConfig) -> Result<Placement> {
    let n = p.cores_used();
    if n > chip.num_cores {
        return Err(Error::CapacityExceeded {
            core: n - 1,
            requested: 0,
            in_use: 0,
            capacity: chip.mem_per_core,
        });
    }
    let out = p.op.output_slot();
    let order: Vec<usize> = std::iter::once(out).chain(0..out).collect();
    let mut cores = Vec::with_capacity(n);
    for core in 0..n {
        let coords = p.core_coords(core);
        let mut offset = chip.shift_buffer;
        let mut parts = Vec::with_capacity(order.len());
        for &slot in &order {
            let c = &p.configs[slot];
            let bytes = c.window_bytes();
            parts.push(PlacedPartition {
                slot,
                tensor: c.name.clone(),
                block: p.block_coords(slot, &coords),
                start: p.window_start(slot, &coords),
                window: c.window.clone(),
                offset,
                bytes,
            });
            offset += bytes;
        }
        if offset > chip.mem_per_core {
            return Err(Error::CapacityExceeded {
                core,
                requested: offset,
                in_use: 0,
                capacity: chip.mem_per_core,
            });
        }
        cores.push(parts);
    }
    Ok(Placement {
        cores,
        shift_buffer: chip.shift_buffer,
    })
}
