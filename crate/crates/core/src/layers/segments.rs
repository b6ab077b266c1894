use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub domain: usize,
    pub start: usize,
    pub rows: usize,
}

/// Partition of a batch's leading axis into per-domain blocks.
///
/// Blocks are contiguous, disjoint and cover every row, and each domain owns
/// at most one block. Batches built by the samplers always list sources by
/// index with the target last; see [`DomainSegments::ordered`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSegments {
    segments: Vec<Segment>,
    total_rows: usize,
}

impl DomainSegments {
    /// Validates blocks listed in row order.
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut next = 0;
        let mut seen = Vec::new();
        for s in &segments {
            if s.start != next {
                return Err(Error::invalid(
                    "segments",
                    format!("segment for domain {} starts at row {}, expected {next}", s.domain, s.start),
                ));
            }
            if s.rows == 0 {
                return Err(Error::invalid(
                    "segments",
                    format!("segment for domain {} is empty", s.domain),
                ));
            }
            if seen.contains(&s.domain) {
                return Err(Error::invalid(
                    "segments",
                    format!("domain {} appears twice", s.domain),
                ));
            }
            seen.push(s.domain);
            next += s.rows;
        }
        Ok(DomainSegments {
            segments,
            total_rows: next,
        })
    }

    /// Domain `i` gets `sizes[i]` rows, laid out in domain order.
    pub fn ordered(sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let segments = sizes
            .iter()
            .enumerate()
            .map(|(domain, &rows)| {
                let s = Segment {
                    domain,
                    start,
                    rows,
                };
                start += rows;
                s
            })
            .collect();
        DomainSegments::new(segments)
    }

    /// One block covering the whole batch, owned by domain 0.
    pub fn single(rows: usize) -> Self {
        DomainSegments {
            segments: vec![Segment {
                domain: 0,
                start: 0,
                rows,
            }],
            total_rows: rows,
        }
    }

    pub fn total_rows(&self) -> usize {
        self.total_rows
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter()
    }

    pub fn get(&self, domain: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.domain == domain)
    }

    /// True when domains appear as 0, 1, 2, … in row order.
    pub fn is_canonical(&self) -> bool {
        self.segments.iter().enumerate().all(|(i, s)| s.domain == i)
    }

    /// Checks that exactly the domains `0..domain_count` are present, each with ≥ 2 rows.
    pub fn require_domains(&self, domain_count: usize) -> Result<()> {
        if let Some(s) = self.segments.iter().find(|s| s.domain >= domain_count) {
            return Err(Error::invalid(
                "segments",
                format!(
                    "segment names domain {} but the layer has {domain_count} domains",
                    s.domain
                ),
            ));
        }
        for domain in 0..domain_count {
            let seg = self
                .get(domain)
                .ok_or(Error::MissingDomainSegment { domain })?;
            if seg.rows < 2 {
                return Err(Error::SegmentTooSmall {
                    domain,
                    rows: seg.rows,
                });
            }
        }
        Ok(())
    }

    /// `(start, rows)` pairs in listing order.
    pub fn ranges(&self) -> Vec<(usize, usize)> {
        self.segments.iter().map(|s| (s.start, s.rows)).collect()
    }
}
