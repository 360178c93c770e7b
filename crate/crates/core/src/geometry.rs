//! Planar geometry: points, polygon rings, block geometries and GeoJSON ingestion.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A closed ring stored without the repeated closing vertex.
pub type Ring = Vec<Point2D>;

/// Signed shoelace area; positive for counter-clockwise rings.
pub fn signed_area(ring: &[Point2D]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc
}

/// Crossing-number test with half-open edges.
///
/// A point on an edge shared by two adjacent rings is assigned to exactly one
/// of them: rings own their lower and left boundaries.
pub fn point_in_ring(p: Point2D, ring: &[Point2D]) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn segments_intersect(p1: Point2D, p2: Point2D, q1: Point2D, q2: Point2D) -> bool {
    let orient = |a: Point2D, b: Point2D, c: Point2D| (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// True when no two non-adjacent edges properly cross.
pub fn ring_is_simple(ring: &[Point2D]) -> bool {
    let n = ring.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        for j in i + 1..n {
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            let (c, d) = (ring[j], ring[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Sutherland–Hodgman clip of a ring against an axis-aligned rectangle.
pub fn clip_ring_to_rect(ring: &[Point2D], xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Ring {
    fn clip_edge(
        input: &[Point2D],
        inside: impl Fn(Point2D) -> bool,
        cross: impl Fn(Point2D, Point2D) -> Point2D,
    ) -> Ring {
        let mut out = Vec::with_capacity(input.len() + 4);
        let n = input.len();
        for i in 0..n {
            let cur = input[i];
            let prev = input[(i + n - 1) % n];
            match (inside(cur), inside(prev)) {
                (true, true) => out.push(cur),
                (true, false) => {
                    out.push(cross(prev, cur));
                    out.push(cur);
                }
                (false, true) => out.push(cross(prev, cur)),
                (false, false) => {}
            }
        }
        out
    }
    let at_x = |x: f64| {
        move |a: Point2D, b: Point2D| {
            let t = (x - a.x) / (b.x - a.x);
            Point2D::new(x, a.y + t * (b.y - a.y))
        }
    };
    let at_y = |y: f64| {
        move |a: Point2D, b: Point2D| {
            let t = (y - a.y) / (b.y - a.y);
            Point2D::new(a.x + t * (b.x - a.x), y)
        }
    };
    let mut poly: Ring = ring.to_vec();
    poly = clip_edge(&poly, |p| p.x >= xmin, at_x(xmin));
    if poly.is_empty() {
        return poly;
    }
    poly = clip_edge(&poly, |p| p.x <= xmax, at_x(xmax));
    if poly.is_empty() {
        return poly;
    }
    poly = clip_edge(&poly, |p| p.y >= ymin, at_y(ymin));
    if poly.is_empty() {
        return poly;
    }
    clip_edge(&poly, |p| p.y <= ymax, at_y(ymax))
}

/// One polygon: an outer ring (counter-clockwise) and optional holes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub outer: Ring,
    pub holes: Vec<Ring>,
}

impl Polygon {
    pub fn area(&self) -> f64 {
        signed_area(&self.outer).abs() - self.holes.iter().map(|h| signed_area(h).abs()).sum::<f64>()
    }

    pub fn contains(&self, p: Point2D) -> bool {
        point_in_ring(p, &self.outer) && !self.holes.iter().any(|h| point_in_ring(p, h))
    }

    pub fn clipped_area(&self, xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> f64 {
        let outer = signed_area(&clip_ring_to_rect(&self.outer, xmin, ymin, xmax, ymax)).abs();
        let holes: f64 = self
            .holes
            .iter()
            .map(|h| signed_area(&clip_ring_to_rect(h, xmin, ymin, xmax, ymax)).abs())
            .sum();
        outer - holes
    }
}

/// An areal unit on which health counts are observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGeometry {
    pub id: String,
    pub polygons: Vec<Polygon>,
    area: f64,
}

impl BlockGeometry {
    pub fn new(id: impl Into<String>, polygons: Vec<Polygon>) -> Result<Self> {
        let id = id.into();
        let mut polygons = polygons;
        for poly in polygons.iter_mut() {
            for ring in std::iter::once(&mut poly.outer).chain(poly.holes.iter_mut()) {
                if ring.len() > 1 && ring.first() == ring.last() {
                    ring.pop();
                }
                if ring.iter().any(|p| !p.is_finite()) {
                    return Err(Error::InvalidInput(format!("block {id}: non-finite coordinate")));
                }
                if !ring_is_simple(ring) {
                    return Err(Error::InvalidInput(format!("block {id}: ring is not simple")));
                }
            }
            if signed_area(&poly.outer) < 0.0 {
                poly.outer.reverse();
            }
            for h in poly.holes.iter_mut() {
                if signed_area(h) > 0.0 {
                    h.reverse();
                }
            }
        }
        let area: f64 = polygons.iter().map(Polygon::area).sum();
        if !(area > 0.0) {
            return Err(Error::InvalidInput(format!("block {id}: non-positive area")));
        }
        Ok(Self { id, polygons, area })
    }

    pub fn rectangle(id: impl Into<String>, xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let outer = vec![
            Point2D::new(xmin, ymin),
            Point2D::new(xmax, ymin),
            Point2D::new(xmax, ymax),
            Point2D::new(xmin, ymax),
        ];
        Self::new(id, vec![Polygon { outer, holes: vec![] }])
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn contains(&self, p: Point2D) -> bool {
        self.polygons.iter().any(|poly| poly.contains(p))
    }

    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in self.polygons.iter().flat_map(|poly| poly.outer.iter()) {
            b.0 = b.0.min(p.x);
            b.1 = b.1.min(p.y);
            b.2 = b.2.max(p.x);
            b.3 = b.3.max(p.y);
        }
        b
    }

    pub fn clipped_area(&self, xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> f64 {
        self.polygons
            .iter()
            .map(|p| p.clipped_area(xmin, ymin, xmax, ymax))
            .sum()
    }
}

fn parse_ring(v: &Value) -> Result<Ring> {
    let coords = v
        .as_array()
        .ok_or_else(|| Error::Parse("ring must be an array of positions".into()))?;
    coords
        .iter()
        .map(|c| {
            let pair = c.as_array().filter(|a| a.len() >= 2);
            match pair.and_then(|a| Some((a[0].as_f64()?, a[1].as_f64()?))) {
                Some((x, y)) => Ok(Point2D::new(x, y)),
                None => Err(Error::Parse("position must be [x, y]".into())),
            }
        })
        .collect()
}

fn parse_polygon(v: &Value) -> Result<Polygon> {
    let rings = v
        .as_array()
        .ok_or_else(|| Error::Parse("polygon must be an array of rings".into()))?;
    let mut rings = rings.iter().map(parse_ring);
    let outer = rings
        .next()
        .ok_or_else(|| Error::Parse("polygon has no rings".into()))??;
    let holes = rings.collect::<Result<Vec<_>>>()?;
    Ok(Polygon { outer, holes })
}

/// Reads a FeatureCollection of Polygon/MultiPolygon features keyed by an `id` property.
pub fn blocks_from_geojson(text: &str) -> Result<Vec<BlockGeometry>> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if root.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(Error::Parse("expected a FeatureCollection".into()));
    }
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse("missing features array".into()))?;
    features
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let id = match f.get("properties").and_then(|p| p.get("id")) {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Number(n)) => n.to_string(),
                _ => return Err(Error::Parse(format!("feature {k} has no id property"))),
            };
            let geom = f
                .get("geometry")
                .ok_or_else(|| Error::Parse(format!("feature {id} has no geometry")))?;
            let coords = geom
                .get("coordinates")
                .ok_or_else(|| Error::Parse(format!("feature {id} has no coordinates")))?;
            let polygons = match geom.get("type").and_then(Value::as_str) {
                Some("Polygon") => vec![parse_polygon(coords)?],
                Some("MultiPolygon") => coords
                    .as_array()
                    .ok_or_else(|| Error::Parse(format!("feature {id}: bad MultiPolygon")))?
                    .iter()
                    .map(parse_polygon)
                    .collect::<Result<Vec<_>>>()?,
                other => {
                    return Err(Error::Parse(format!(
                        "feature {id}: unsupported geometry type {other:?}"
                    )))
                }
            };
            BlockGeometry::new(id, polygons)
        })
        .collect()
}

/// Serializes blocks as a GeoJSON FeatureCollection with closed rings.
pub fn blocks_to_geojson(blocks: &[BlockGeometry]) -> String {
    let ring_json = |r: &Ring| {
        let mut pts: Vec<Value> = r.iter().map(|p| serde_json::json!([p.x, p.y])).collect();
        if let Some(first) = pts.first().cloned() {
            pts.push(first);
        }
        Value::Array(pts)
    };
    let features: Vec<Value> = blocks
        .iter()
        .map(|b| {
            let polys: Vec<Value> = b
                .polygons
                .iter()
                .map(|p| {
                    let mut rings = vec![ring_json(&p.outer)];
                    rings.extend(p.holes.iter().map(ring_json));
                    Value::Array(rings)
                })
                .collect();
            let geometry = if polys.len() == 1 {
                serde_json::json!({"type": "Polygon", "coordinates": polys[0]})
            } else {
                serde_json::json!({"type": "MultiPolygon", "coordinates": polys})
            };
            serde_json::json!({
                "type": "Feature",
                "properties": {"id": b.id},
                "geometry": geometry,
            })
        })
        .collect();
    let fc = serde_json::json!({"type": "FeatureCollection", "features": features});
    serde_json::to_string_pretty(&fc).expect("GeoJSON serialization")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Ring {
        vec![
            Point2D::new(0.0, 0.0),
            Point2D::new(1.0, 0.0),
            Point2D::new(1.0, 1.0),
            Point2D::new(0.0, 1.0),
        ]
    }

    #[test]
    fn shoelace_orientation() {
        let mut r = square();
        assert_eq!(signed_area(&r), 1.0);
        r.reverse();
        assert_eq!(signed_area(&r), -1.0);
    }

    #[test]
    fn half_open_boundary_ownership() {
        let left = square();
        let right: Ring = square().iter().map(|p| Point2D::new(p.x + 1.0, p.y)).collect();
        let on_shared = Point2D::new(1.0, 0.5);
        assert!(point_in_ring(on_shared, &right) ^ point_in_ring(on_shared, &left));
        assert!(point_in_ring(Point2D::new(0.5, 0.0), &left));
        assert!(!point_in_ring(Point2D::new(0.5, 1.0), &left));
    }

    #[test]
    fn clipping_triangle_against_cell() {
        let tri = vec![Point2D::new(0.0, 0.0), Point2D::new(2.0, 0.0), Point2D::new(0.0, 2.0)];
        let a = signed_area(&clip_ring_to_rect(&tri, 0.0, 0.0, 1.0, 1.0));
        assert!((a - 1.0).abs() < 1e-15);
        let b = signed_area(&clip_ring_to_rect(&tri, 1.0, 0.0, 2.0, 1.0));
        assert!((b - 0.5).abs() < 1e-15);
        assert!(clip_ring_to_rect(&tri, 3.0, 3.0, 4.0, 4.0).is_empty());
    }

    #[test]
    fn self_intersecting_ring_rejected() {
        let bowtie = vec![
            Point2D::new(0.0, 0.0),
            Point2D::new(1.0, 1.0),
            Point2D::new(1.0, 0.0),
            Point2D::new(0.0, 1.0),
        ];
        let err = BlockGeometry::new("b", vec![Polygon { outer: bowtie, holes: vec![] }]);
        assert!(err.is_err());
    }

    #[test]
    fn hole_reduces_area() {
        let hole: Ring = vec![
            Point2D::new(0.25, 0.25),
            Point2D::new(0.75, 0.25),
            Point2D::new(0.75, 0.75),
            Point2D::new(0.25, 0.75),
        ];
        let b = BlockGeometry::new("h", vec![Polygon { outer: square(), holes: vec![hole] }]).unwrap();
        assert!((b.area() - 0.75).abs() < 1e-15);
        assert!(!b.contains(Point2D::new(0.5, 0.5)));
        assert!(b.contains(Point2D::new(0.1, 0.5)));
    }

    #[test]
    fn geojson_round_trip() {
        let blocks = vec![
            BlockGeometry::rectangle("a", 0.0, 0.0, 1.0, 1.0).unwrap(),
            BlockGeometry::rectangle("b", 1.0, 0.0, 2.0, 1.0).unwrap(),
        ];
        let text = blocks_to_geojson(&blocks);
        let back = blocks_from_geojson(&text).unwrap();
        assert_eq!(back, blocks);
    }

    #[test]
    fn geojson_multipolygon_and_numeric_id() {
        let text = r#"{"type":"FeatureCollection","features":[{"type":"Feature","properties":{"id":7},
          "geometry":{"type":"MultiPolygon","coordinates":[[[[0,0],[1,0],[1,1],[0,0]]],[[[2,0],[3,0],[3,1],[2,0]]]]}}]}"#;
        let b = blocks_from_geojson(text).unwrap();
        assert_eq!(b[0].id, "7");
        assert!((b[0].area() - 1.0).abs() < 1e-15);
    }
}
