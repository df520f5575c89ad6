use std::fmt;

use crate::error::{Error, Result};

/// Order of the tokens the action expert sees:
/// `[SINK], state, prefix actions, noisy actions`, each action band sorted
/// by chunk timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub has_sink: bool,
    pub has_state: bool,
    pub prefix_len: usize,
    pub noisy_len: usize,
}

/// Role of one token in a [`TokenLayout`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    Sink,
    State,
    /// Clean committed action at the given chunk timestep.
    Prefix(usize),
    /// Noisy action at the given chunk timestep.
    Noisy(usize),
}

impl TokenLayout {
    pub fn new(prefix_len: usize, noisy_len: usize) -> Self {
        Self { has_sink: true, has_state: true, prefix_len, noisy_len }
    }

    pub fn horizon(&self) -> usize {
        self.prefix_len + self.noisy_len
    }

    fn lead(&self) -> usize {
        self.has_sink as usize + self.has_state as usize
    }

    pub fn token_count(&self) -> usize {
        self.lead() + self.horizon()
    }

    /// Token index of the action at chunk timestep `t`.
    pub fn action_token(&self, t: usize) -> usize {
        self.lead() + t
    }

    /// Token index of the first noisy action.
    pub fn first_noisy(&self) -> usize {
        self.lead() + self.prefix_len
    }

    pub fn roles(&self) -> Vec<TokenRole> {
        let mut out = Vec::with_capacity(self.token_count());
        if self.has_sink {
            out.push(TokenRole::Sink);
        }
        if self.has_state {
            out.push(TokenRole::State);
        }
        out.extend((0..self.prefix_len).map(TokenRole::Prefix));
        out.extend((self.prefix_len..self.horizon()).map(TokenRole::Noisy));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Causal,
    /// Leading tokens stay visible; action tokens see a trailing window of
    /// `window` earlier chunk timesteps plus their own.
    Lambda { window: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub kind: MaskKind,
}

impl MaskSpec {
    pub fn causal() -> Self {
        Self { kind: MaskKind::Causal }
    }

    pub fn lambda(window: usize) -> Self {
        Self { kind: MaskKind::Lambda { window } }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            MaskKind::Lambda { window: 0 } => {
                Err(Error::Config("Λ-shape mask needs window >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Square visibility matrix over self tokens, row = query, column = key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    size: usize,
    visible: Vec<bool>,
}

impl Mask {
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut visible = Vec::with_capacity(size * size);
        for q in 0..size {
            for k in 0..size {
                visible.push(f(q, k));
            }
        }
        Self { size, visible }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.visible[q * self.size + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.visible[q * self.size..(q + 1) * self.size]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.visible
    }

    /// One query row per line, `1` visible, `.` masked.
    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity(self.size * (self.size + 1));
        for q in 0..self.size {
            for &v in self.row(q) {
                s.push(if v { '1' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_ascii())
    }
}

pub fn build_mask(layout: &TokenLayout, spec: &MaskSpec) -> Result<Mask> {
    spec.validate()?;
    let n = layout.token_count();
    match spec.kind {
        MaskKind::Causal => Ok(Mask::from_fn(n, |q, k| k <= q)),
        MaskKind::Lambda { window } => {
            let roles = layout.roles();
            let step = |r: TokenRole| match r {
                TokenRole::Prefix(t) | TokenRole::Noisy(t) => Some(t),
                _ => None,
            };
            Ok(Mask::from_fn(n, |q, k| match (step(roles[q]), step(roles[k])) {
                (Some(p), Some(t)) => t <= p && t + window >= p,
                (Some(_), None) => true,
                (None, _) => k <= q,
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn visible_set(m: &Mask, q: usize) -> Vec<usize> {
        (0..m.size()).filter(|&k| m.get(q, k)).collect()
    }

    #[test]
    fn causal_is_lower_triangular() {
        let m = build_mask(&TokenLayout::new(0, 3), &MaskSpec::causal()).unwrap();
        assert_eq!(m.to_ascii(), "1....\n11...\n111..\n1111.\n11111\n");
    }

    #[test]
    fn lambda_window_two() {
        let m = build_mask(&TokenLayout::new(2, 3), &MaskSpec::lambda(2)).unwrap();
        assert_eq!(visible_set(&m, 6), vec![0, 1, 4, 5, 6]);
        assert_eq!(visible_set(&m, 4), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn wide_lambda_is_causal() {
        for t in 1..8 {
            for prefix in 0..t {
                let layout = TokenLayout::new(prefix, t - prefix);
                let c = build_mask(&layout, &MaskSpec::causal()).unwrap();
                let l = build_mask(&layout, &MaskSpec::lambda(t)).unwrap();
                assert_eq!(c, l);
            }
        }
    }

    #[test]
    fn zero_window_rejected() {
        let e = build_mask(&TokenLayout::new(1, 2), &MaskSpec::lambda(0));
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn roles_follow_token_order() {
        let l = TokenLayout::new(2, 1);
        assert_eq!(
            l.roles(),
            vec![TokenRole::Sink, TokenRole::State, TokenRole::Prefix(0), TokenRole::Prefix(1), TokenRole::Noisy(2)]
        );
        assert_eq!(l.token_count(), 5);
    }

    /// Independent statement of the rule in raw token indices.
    fn brute_force(t: usize, w: usize, q: usize, k: usize) -> bool {
        let n = 2 + t;
        assert!(q < n && k < n);
        if q < 2 {
            return k <= q;
        }
        if k < 2 {
            return true;
        }
        let (p, j) = ((q - 2) as i64, (k - 2) as i64);
        j <= p && j >= (p - w as i64).max(0)
    }

    #[test]
    fn lambda_matches_brute_force_exhaustively() {
        for t in 1..=12 {
            for prefix in 0..=6.min(t) {
                for w in 1..=8 {
                    let m = build_mask(&TokenLayout::new(prefix, t - prefix), &MaskSpec::lambda(w)).unwrap();
                    for q in 0..t + 2 {
                        for k in 0..t + 2 {
                            assert_eq!(m.get(q, k), brute_force(t, w, q, k), "T={t} c={prefix} w={w} ({q},{k})");
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn distant_queries_never_see_prefix(t in 1usize..=12, prefix in 0usize..=6, w in 1usize..=8) {
            prop_assume!(prefix <= t);
            let layout = TokenLayout::new(prefix, t - prefix);
            let m = build_mask(&layout, &MaskSpec::lambda(w)).unwrap();
            for p in prefix..t {
                if p as i64 - w as i64 > prefix as i64 - 1 {
                    for i in 0..prefix {
                        prop_assert!(!m.get(layout.action_token(p), layout.action_token(i)));
                    }
                }
            }
        }

        #[test]
        fn every_row_has_a_visible_entry(t in 1usize..=12, prefix in 0usize..=6, w in 1usize..=8) {
            prop_assume!(prefix <= t);
            let m = build_mask(&TokenLayout::new(prefix, t - prefix), &MaskSpec::lambda(w)).unwrap();
            for q in 0..m.size() {
                prop_assert!(m.row(q).iter().any(|&v| v));
                prop_assert!(m.get(q, q));
            }
        }
    }
}
