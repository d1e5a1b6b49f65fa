//! Dense state-action tables stored row-major.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A matrix indexed by `(state, action)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Table<T> {
    n_states: usize,
    n_actions: usize,
    data: Vec<T>,
}

impl<T: Clone> Table<T> {
    pub fn filled(n_states: usize, n_actions: usize, value: T) -> Self {
        Self {
            n_states,
            n_actions,
            data: vec![value; n_states * n_actions],
        }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Option<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_actions) {
            return None;
        }
        Some(Self {
            n_states,
            n_actions,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value.clone());
    }

    pub fn fill_row(&mut self, state: usize, value: T) {
        self.row_mut(state).iter_mut().for_each(|x| *x = value.clone());
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        self.data
            .chunks(self.n_actions.max(1))
            .take(self.n_states)
            .map(<[T]>::to_vec)
            .collect()
    }
}

impl<T> Table<T> {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat index of `(state, action)`.
    #[inline]
    pub fn index(&self, state: usize, action: usize) -> usize {
        debug_assert!(state < self.n_states && action < self.n_actions);
        state * self.n_actions + action
    }

    #[inline]
    pub fn get(&self, state: usize, action: usize) -> &T {
        &self.data[self.index(state, action)]
    }

    #[inline]
    pub fn get_mut(&mut self, state: usize, action: usize) -> &mut T {
        let i = self.index(state, action);
        &mut self.data[i]
    }

    pub fn row(&self, state: usize) -> &[T] {
        &self.data[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn row_mut(&mut self, state: usize) -> &mut [T] {
        &mut self.data[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Table<U> {
        Table {
            n_states: self.n_states,
            n_actions: self.n_actions,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl Table<f64> {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self::filled(n_states, n_actions, 0.0)
    }

    /// Largest absolute entrywise difference over the rows selected by `keep`.
    pub fn max_abs_diff(&self, other: &Table<f64>, keep: impl Fn(usize) -> bool) -> f64 {
        assert_eq!(self.n_states, other.n_states);
        assert_eq!(self.n_actions, other.n_actions);
        (0..self.n_states)
            .filter(|&s| keep(s))
            .flat_map(|s| self.row(s).iter().zip(other.row(s)))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }
}

impl<T: Serialize + Clone> Serialize for Table<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de, T: Deserialize<'de> + Clone> Deserialize<'de> for Table<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<T>>::deserialize(deserializer)?;
        Table::from_rows(rows).ok_or_else(|| D::Error::custom("ragged table rows"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let t = Table::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(*t.get(1, 0), 3.0);
        assert_eq!(t.row(0), &[1.0, 2.0]);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, "[[1.0,2.0],[3.0,4.0]]");
        let back: Table<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(Table::from_rows(vec![vec![1.0], vec![1.0, 2.0]]).is_none());
        assert!(serde_json::from_str::<Table<f64>>("[[1.0],[1.0,2.0]]").is_err());
    }
}
