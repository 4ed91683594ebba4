//! Streamline and tractogram domain types (continuous voxel coordinates).

pub type Point = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Streamline {
    pub points: Vec<Point>,
}

impl Streamline {
    pub fn new(points: Vec<Point>) -> Self {
        Streamline { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> Option<Point> {
        self.points.first().copied()
    }

    pub fn last(&self) -> Option<Point> {
        self.points.last().copied()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tractogram {
    pub streamlines: Vec<Streamline>,
    /// Optional per-streamline bundle labels (same length as `streamlines`).
    pub labels: Option<Vec<usize>>,
}

impl Tractogram {
    pub fn new(streamlines: Vec<Streamline>) -> Self {
        Tractogram { streamlines, labels: None }
    }

    pub fn with_labels(streamlines: Vec<Streamline>, labels: Vec<usize>) -> Self {
        debug_assert_eq!(streamlines.len(), labels.len());
        Tractogram { streamlines, labels: Some(labels) }
    }

    pub fn len(&self) -> usize {
        self.streamlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streamlines.is_empty()
    }
}

pub fn norm3(v: Point) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn dot3(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn sub3(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add3(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale3(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Unit vector, or None when the norm underflows.
pub fn normalize3(v: Point) -> Option<Point> {
    let n = norm3(v);
    if n > 0.0 && n.is_finite() {
        Some(scale3(v, 1.0 / n))
    } else {
        None
    }
}
