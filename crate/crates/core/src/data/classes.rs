use super::DataError;

/// LIP label names, background first.
pub const LIP_NAMES: [&str; 20] = [
    "bkg", "hat", "hair", "glove", "glasses", "u-clo", "dress", "coat", "sockets", "pants", "jsuits", "scarf", "skirt",
    "face", "l-arm", "r-arm", "l-leg", "r-leg", "l-shoe", "r-shoe",
];

/// Left/right classes exchanged by a horizontal flip.
pub const LIP_FLIP_PAIRS: [(usize, usize); 3] = [(14, 15), (16, 17), (18, 19)];

/// Coarse body regions used to merge LIP parts when fewer classes are
/// requested: head, torso, arms, legs (part indices in drawing-independent
/// order).
pub(crate) const REGIONS: [(&str, &[usize]); 4] = [
    ("head", &[1, 2, 4, 13, 11]),
    ("torso", &[5, 7, 10, 6]),
    ("arms", &[15, 14, 3]),
    ("legs", &[12, 9, 8, 17, 16, 19, 18]),
];

/// The 20-entry PASCAL-style colour map.
fn palette_color(k: usize) -> [u8; 3] {
    let mut c = [0u8; 3];
    let mut id = k;
    for bit in 0..8 {
        for (ch, v) in c.iter_mut().enumerate() {
            *v |= (((id >> ch) & 1) as u8) << (7 - bit);
        }
        id >>= 3;
        if id == 0 {
            break;
        }
    }
    c
}

/// Maps each LIP part (1..=19) to a class in `1..k` for `k` classes.
/// With 20 classes this is the identity.
pub fn part_to_class(k: usize) -> [u8; 20] {
    let mut map = [0u8; 20];
    let parts = k - 1;
    if parts >= 19 {
        for (p, m) in map.iter_mut().enumerate() {
            *m = p as u8;
        }
        return map;
    }
    if parts < REGIONS.len() {
        for (g, (_, members)) in REGIONS.iter().enumerate() {
            let class = 1 + g * parts / REGIONS.len();
            for &p in *members {
                map[p] = class as u8;
            }
        }
        return map;
    }
    // one class per region, then split the regions with most parts per class
    let mut alloc = [1usize; 4];
    for _ in REGIONS.len()..parts {
        let g = (0..4)
            .filter(|&g| alloc[g] < REGIONS[g].1.len())
            .max_by(|&a, &b| {
                let ra = REGIONS[a].1.len() as f64 / alloc[a] as f64;
                let rb = REGIONS[b].1.len() as f64 / alloc[b] as f64;
                ra.partial_cmp(&rb).expect("finite").then(b.cmp(&a))
            })
            .expect("parts < 19 leaves a splittable region");
        alloc[g] += 1;
    }
    let mut next = 1;
    for (g, (_, members)) in REGIONS.iter().enumerate() {
        let s = members.len();
        for (j, &p) in members.iter().enumerate() {
            map[p] = (next + j * alloc[g] / s) as u8;
        }
        next += alloc[g];
    }
    map
}

/// Class names, horizontal-flip pairs and a rendering palette.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTable {
    pub names: Vec<String>,
    pub flip_pairs: Vec<(usize, usize)>,
    pub palette: Vec<[u8; 3]>,
}

impl ClassTable {
    pub fn lip() -> Self {
        ClassTable {
            names: LIP_NAMES.iter().map(|s| s.to_string()).collect(),
            flip_pairs: LIP_FLIP_PAIRS.to_vec(),
            palette: (0..20).map(palette_color).collect(),
        }
    }

    /// Table for `k` classes obtained by merging LIP parts with
    /// [`part_to_class`]. A flip pair survives only when both sides stay
    /// single-part classes.
    pub fn for_classes(k: usize) -> Result<Self, DataError> {
        if !(2..=20).contains(&k) {
            return Err(DataError::Classes(k));
        }
        if k == 20 {
            return Ok(Self::lip());
        }
        let map = part_to_class(k);
        let members = |c: usize| -> Vec<usize> { (1..20).filter(|&p| map[p] as usize == c).collect() };
        let mut names = vec!["bkg".to_string()];
        for c in 1..k {
            let m = members(c);
            let region = REGIONS.iter().find(|(_, r)| {
                let mut a = r.to_vec();
                a.sort_unstable();
                a == m
            });
            names.push(match (m.as_slice(), region) {
                ([single], _) => LIP_NAMES[*single].to_string(),
                (_, Some((name, _))) => name.to_string(),
                _ => m.iter().map(|&p| LIP_NAMES[p]).collect::<Vec<_>>().join("+"),
            });
        }
        let flip_pairs = LIP_FLIP_PAIRS
            .iter()
            .map(|&(a, b)| (map[a] as usize, map[b] as usize))
            .filter(|&(a, b)| a != b && members(a).len() == 1 && members(b).len() == 1)
            .collect();
        Ok(ClassTable {
            names,
            flip_pairs,
            palette: (0..k).map(palette_color).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Checks that flip pairs index valid classes and are disjoint.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = vec![false; self.len()];
        for &(a, b) in &self.flip_pairs {
            for i in [a, b] {
                if i >= self.len() || seen[i] {
                    return Err(DataError::Format(format!(
                        "flip pair ({a}, {b}) is out of range or overlaps another pair"
                    )));
                }
                seen[i] = true;
            }
        }
        if self.palette.len() != self.len() {
            return Err(DataError::Format("palette length differs from class count".into()));
        }
        Ok(())
    }

    /// Class index after a horizontal flip.
    pub fn flipped(&self, label: usize) -> usize {
        for &(a, b) in &self.flip_pairs {
            if label == a {
                return b;
            }
            if label == b {
                return a;
            }
        }
        label
    }
}
