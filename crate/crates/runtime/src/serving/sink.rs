use std::collections::HashSet;

use flowserve_core::row::{HttpResponseData, RoutingId, Row, Value};

/// What a finished pipeline segment owes its clients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Settlement {
    /// One reply per routing id, in output order.
    pub replies: Vec<(RoutingId, HttpResponseData)>,
    /// Ids that entered the segment but produced no output row.
    pub filtered: Vec<RoutingId>,
    /// Extra output rows beyond the first for some id.
    pub fanout: usize,
}

/// Matches a segment's output rows to the ids that entered it. The first
/// output row per id wins; later ones count as fan-out. A null reply cell
/// becomes a 500 so that the client still gets exactly one answer.
pub fn settle(input_ids: &[RoutingId], output: &[Row], id_col: usize, reply_col: usize) -> Settlement {
    let mut seen = HashSet::with_capacity(output.len());
    let mut settlement = Settlement::default();
    for row in output {
        let Some(id) = row.get(id_col).as_routing_id() else {
            // The plan guarantees the column; a null id cannot be routed.
            settlement.fanout += 1;
            continue;
        };
        if !seen.insert(id) {
            settlement.fanout += 1;
            continue;
        }
        let response = match row.get(reply_col) {
            Value::HttpResponse(r) => (**r).clone(),
            _ => HttpResponseData::new(500, b"pipeline produced no response".to_vec()),
        };
        settlement.replies.push((id, response));
    }
    settlement.filtered = input_ids.iter().copied().filter(|id| !seen.contains(id)).collect();
    settlement
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seq: u64, status: Option<u16>) -> Row {
        Row::new(vec![
            Value::RoutingId(RoutingId::new(0, seq)),
            status.map_or(Value::Null, |s| Value::from(HttpResponseData::empty(s))),
        ])
    }

    #[test]
    fn first_row_wins_and_missing_ids_are_filtered() {
        let ids: Vec<RoutingId> = (0..4).map(|s| RoutingId::new(0, s)).collect();
        let out = vec![row(2, Some(201)), row(0, Some(200)), row(2, Some(202)), row(3, None)];
        let s = settle(&ids, &out, 0, 1);
        let got: Vec<(u64, u16)> = s.replies.iter().map(|(id, r)| (id.seq, r.status)).collect();
        assert_eq!(got, [(2, 201), (0, 200), (3, 500)]);
        assert_eq!(s.filtered, vec![RoutingId::new(0, 1)]);
        assert_eq!(s.fanout, 1);
    }

    #[test]
    fn everything_filtered() {
        let ids = [RoutingId::new(1, 5)];
        let s = settle(&ids, &[], 0, 1);
        assert!(s.replies.is_empty());
        assert_eq!(s.filtered, ids);
    }
}
