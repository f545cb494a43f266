use std::collections::HashSet;

use super::{Candidate, Source};

/// Slots per channel after the intersection: `(exact, embed)`.
///
/// The exact channel gets the larger half of an odd remainder. A channel that
/// runs short hands its unused slots to the other.
pub fn split_slots(remaining: usize, exact_avail: usize, embed_avail: usize) -> (usize, usize) {
    let exact_quota = remaining.div_ceil(2);
    let embed_quota = remaining / 2;
    let exact = exact_quota.min(exact_avail);
    let embed = embed_quota.min(embed_avail);
    let exact = (exact + (embed_quota - embed)).min(exact_avail);
    let embed = (embed + (remaining - exact - embed).min(embed_avail - embed)).min(embed_avail);
    (exact, embed)
}

/// Merges the two channels into at most `n` unique candidates: the
/// intersection first (by embedding score), then the channel differences
/// alternating exact, embed, exact, ...
pub fn merge_candidates(exact: &[Candidate], embed: &[Candidate], n: usize) -> Vec<Candidate> {
    let exact_ids: HashSet<&str> = exact.iter().map(|c| c.id.as_str()).collect();
    let embed_ids: HashSet<&str> = embed.iter().map(|c| c.id.as_str()).collect();

    let mut out: Vec<Candidate> = embed
        .iter()
        .filter(|c| exact_ids.contains(c.id.as_str()))
        .map(|c| Candidate {
            source: Source::Both,
            ..c.clone()
        })
        .take(n)
        .collect();
    let remaining = n - out.len();
    let exact_only: Vec<&Candidate> = exact
        .iter()
        .filter(|c| !embed_ids.contains(c.id.as_str()))
        .collect();
    let embed_only: Vec<&Candidate> = embed
        .iter()
        .filter(|c| !exact_ids.contains(c.id.as_str()))
        .collect();
    let (take_exact, take_embed) = split_slots(remaining, exact_only.len(), embed_only.len());
    let mut a = exact_only[..take_exact].iter();
    let mut b = embed_only[..take_embed].iter();
    loop {
        let x = a.next();
        let y = b.next();
        if x.is_none() && y.is_none() {
            break;
        }
        out.extend(x.into_iter().chain(y).map(|c| (*c).clone()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(ids: &[u32], source: Source) -> Vec<Candidate> {
        ids.iter()
            .enumerate()
            .map(|(rank, &i)| Candidate {
                id: format!("d{i:03}"),
                index: i as usize,
                score: 100.0 - rank as f64,
                source,
            })
            .collect()
    }

    #[test]
    fn even_split() {
        let exact = list(&[1, 2, 3, 4, 10, 11, 12, 13, 14], Source::Exact);
        let embed = list(&[4, 3, 2, 1, 20, 21, 22, 23, 24], Source::Embed);
        let m = merge_candidates(&exact, &embed, 10);
        assert_eq!(m.len(), 10);
        let ids: Vec<usize> = m.iter().map(|c| c.index).collect();
        assert_eq!(ids, vec![4, 3, 2, 1, 10, 20, 11, 21, 12, 22]);
        assert!(m[..4].iter().all(|c| c.source == Source::Both));
    }

    #[test]
    fn odd_remainder_favours_exact() {
        let exact = list(&[1, 2, 3, 10, 11, 12, 13, 14], Source::Exact);
        let embed = list(&[1, 2, 3, 20, 21, 22, 23, 24], Source::Embed);
        let m = merge_candidates(&exact, &embed, 10);
        let exact_n = m.iter().filter(|c| c.source == Source::Exact).count();
        let embed_n = m.iter().filter(|c| c.source == Source::Embed).count();
        assert_eq!((exact_n, embed_n), (4, 3));
    }

    #[test]
    fn backfill_from_other_channel() {
        assert_eq!(split_slots(7, 1, 10), (1, 6));
        assert_eq!(split_slots(7, 10, 1), (6, 1));
        assert_eq!(split_slots(7, 2, 2), (2, 2));
        assert_eq!(split_slots(0, 5, 5), (0, 0));
    }

    #[test]
    fn identical_channels_give_prefix() {
        let a = list(&[5, 6, 7, 8, 9], Source::Exact);
        let b = list(&[5, 6, 7, 8, 9], Source::Embed);
        let m = merge_candidates(&a, &b, 3);
        let ids: Vec<usize> = m.iter().map(|c| c.index).collect();
        assert_eq!(ids, vec![5, 6, 7]);
    }
}
