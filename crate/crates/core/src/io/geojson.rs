//! GeoJSON FeatureCollections with one feature per unit.
//!
//! On regular grids a unit's geometry is the union of its cell rectangles
//! (`MultiPolygon`; 1-D cells become unit-height strips on `y ∈ [0, 1]`).
//! Irregular grids fall back to a `MultiPoint` of cell centers. Each
//! feature carries `label` and `cells`, so a partition can be read back
//! without geometry operations.

use std::io::{Read, Write};

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::geometry::{Partition, SpatialGrid};

fn cell_ring(grid: &SpatialGrid, c: usize) -> Option<Value> {
    let (lo, hi) = grid.cell_bounds(c)?;
    let (x0, x1) = (lo[0], hi[0]);
    let (y0, y1) = if grid.dim() >= 2 { (lo[1], hi[1]) } else { (0.0, 1.0) };
    Some(json!([[[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]]))
}

fn unit_geometry(grid: &SpatialGrid, cells: &[usize]) -> Value {
    let rings: Option<Vec<Value>> =
        if grid.dim() <= 2 { cells.iter().map(|&c| cell_ring(grid, c)).collect() } else { None };
    match rings {
        Some(polys) => json!({"type": "MultiPolygon", "coordinates": polys}),
        None => {
            let pts: Vec<Value> = cells.iter().map(|&c| json!(grid.center(c))).collect();
            json!({"type": "MultiPoint", "coordinates": pts})
        }
    }
}

/// Builds the collection. `properties(u)` adds extra per-unit properties.
pub fn partition_collection(
    grid: &SpatialGrid,
    part: &Partition,
    properties: impl Fn(usize) -> Map<String, Value>,
) -> Value {
    let members = part.members();
    let features: Vec<Value> = members
        .into_iter()
        .enumerate()
        .map(|(u, cells)| {
            let mut props = Map::new();
            props.insert("label".into(), u.into());
            props.insert("cells".into(), json!(cells));
            props.insert("area".into(), json!(cells.iter().map(|&c| grid.areas()[c]).sum::<f64>()));
            props.extend(properties(u));
            json!({"type": "Feature", "geometry": unit_geometry(grid, &cells), "properties": props})
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}

pub fn write_partition<W: Write>(
    w: W,
    grid: &SpatialGrid,
    part: &Partition,
    properties: impl Fn(usize) -> Map<String, Value>,
) -> Result<()> {
    super::write_json(w, &partition_collection(grid, part, properties))
}

/// Reads a partition from the `cells` and `label` properties.
pub fn read_partition<R: Read>(r: R, grid: &SpatialGrid) -> Result<Partition> {
    let doc: Value = serde_json::from_reader(r)?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse("GeoJSON has no feature list".into()))?;
    let mut labels = vec![usize::MAX; grid.len()];
    for (i, f) in features.iter().enumerate() {
        let props = f.get("properties").ok_or_else(|| Error::Parse(format!("feature {i} has no properties")))?;
        let label = props.get("label").and_then(Value::as_u64).unwrap_or(i as u64) as usize;
        let cells = props
            .get("cells")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Parse(format!("feature {i} has no `cells` property")))?;
        for c in cells {
            let c = c.as_u64().ok_or_else(|| Error::Parse(format!("feature {i}: bad cell index")))? as usize;
            if c >= grid.len() {
                return Err(Error::Parse(format!("feature {i}: cell {c} is outside the grid")));
            }
            labels[c] = label;
        }
    }
    if labels.contains(&usize::MAX) {
        return Err(Error::Parse("GeoJSON features do not cover every cell".into()));
    }
    Partition::relabeled(&labels, grid)
}
