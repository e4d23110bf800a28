//! One auction end-to-end: eCPM ranking, GSP pricing, expected-value
//! settlement and budget accounting.
//!
//! Settlement is in expectation: a winner at slot `k` is charged
//! `price_k * pctr_k` and credited `pctr_k * pcvr_k * ppb_k`, where
//! `price_k` is the per-click GSP price derived from the next-ranked
//! candidate. Losers pay nothing and earn nothing.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type MerchantId = u32;

/// Absolute tolerance for currency comparisons.
pub const CURRENCY_EPS: f64 = 1e-9;

/// A merchant's standing market data plus its budget ledger entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MerchantProfile {
    pub merchant_id: MerchantId,
    /// The manually set per-click bid, before any adjustment.
    pub base_bid: f64,
    /// Product price credited on a conversion.
    pub ppb: f64,
    pub budget: f64,
    pub budget_remaining: f64,
    /// Merchant-cluster index in `[0, N)`.
    pub cluster_id: usize,
}

impl MerchantProfile {
    pub fn spent(&self) -> f64 {
        self.budget - self.budget_remaining
    }
}

/// One merchant's entry in one auction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAd {
    pub merchant_id: MerchantId,
    pub pctr: f64,
    pub pcvr: f64,
    /// Historical average conversion rate for this merchant; strictly positive.
    pub pcvr_avg: f64,
    /// Per-click bid after adjustment.
    pub final_bid: f64,
}

impl CandidateAd {
    pub fn ecpm(&self) -> f64 {
        self.final_bid * self.pctr
    }

    /// Impression-level value ratio `pcvr / pcvr_avg`.
    pub fn bratio(&self) -> f64 {
        self.pcvr / self.pcvr_avg
    }
}

/// One consumer request with its recalled candidates.
#[derive(Debug, Clone)]
pub struct AuctionRequest {
    pub request_id: u64,
    pub consumer_id: u64,
    pub consumer_cluster_id: usize,
    /// Seconds since episode start.
    pub timestamp: u64,
    pub candidates: Vec<CandidateAd>,
}

/// Settlement record for one winning slot.
#[derive(Debug, Clone, PartialEq)]
pub struct WinnerRecord {
    pub merchant_id: MerchantId,
    pub expected_cost: f64,
    pub expected_revenue: f64,
    /// Expected click count, i.e. the winner's pctr.
    pub expected_click: f64,
}

/// Outcome of one settled auction; winners in eCPM order.
#[derive(Debug, Clone, Default)]
pub struct AuctionOutcome {
    pub winners: Vec<WinnerRecord>,
    pub slots: usize,
}

/// Budget accounts for all merchants, indexed densely by merchant id.
#[derive(Debug, Clone)]
pub struct BudgetLedger {
    profiles: Vec<MerchantProfile>,
}

impl BudgetLedger {
    /// Builds a ledger from profiles. Ids must be dense `0..n` (one profile
    /// per id, in order).
    pub fn new(profiles: Vec<MerchantProfile>) -> Result<Self> {
        for (idx, p) in profiles.iter().enumerate() {
            if p.merchant_id as usize != idx {
                return Err(Error::invalid(format!(
                    "ledger requires dense merchant ids; slot {idx} holds id {}",
                    p.merchant_id
                )));
            }
            if p.base_bid <= 0.0 {
                return Err(Error::invalid(format!(
                    "merchant {} has non-positive base bid",
                    p.merchant_id
                )));
            }
        }
        Ok(Self { profiles })
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn get(&self, id: MerchantId) -> &MerchantProfile {
        &self.profiles[id as usize]
    }

    pub fn profiles(&self) -> &[MerchantProfile] {
        &self.profiles
    }

    pub fn has_budget(&self, id: MerchantId) -> bool {
        self.profiles[id as usize].budget_remaining > 0.0
    }

    /// Assigns every merchant `budget`; remaining balances reset to match.
    pub fn reset_budgets(&mut self, budget_of: impl Fn(MerchantId) -> f64) {
        for p in &mut self.profiles {
            let b = budget_of(p.merchant_id);
            p.budget = b;
            p.budget_remaining = b;
        }
    }

    /// Charges `cost` against the merchant's balance, flooring at zero.
    /// Returns the balance before the charge.
    pub fn charge(&mut self, id: MerchantId, cost: f64) -> f64 {
        let p = &mut self.profiles[id as usize];
        let before = p.budget_remaining;
        p.budget_remaining = (p.budget_remaining - cost).max(0.0);
        before
    }
}

/// Sorts candidates by descending eCPM (`final_bid * pctr`); exact ties
/// break by ascending merchant id. The output is a permutation of the input.
pub fn rank_by_ecpm(mut candidates: Vec<CandidateAd>) -> Vec<CandidateAd> {
    candidates.sort_by(|a, b| {
        b.ecpm()
            .total_cmp(&a.ecpm())
            .then_with(|| a.merchant_id.cmp(&b.merchant_id))
    });
    candidates
}

/// Per-click GSP price for the winner at `slot_index` within `ranked`:
/// the next-ranked candidate's eCPM divided by the winner's pctr. With no
/// next-ranked candidate the configured reserve price applies.
///
/// Callers must exclude zero-pctr candidates before ranking.
pub fn gsp_price(ranked: &[CandidateAd], slot_index: usize, reserve_price: f64) -> f64 {
    debug_assert!(slot_index < ranked.len());
    debug_assert!(ranked[slot_index].pctr > 0.0);
    match ranked.get(slot_index + 1) {
        Some(next) => next.ecpm() / ranked[slot_index].pctr,
        None => reserve_price,
    }
}

/// Settles one auction against the ledger: filters candidates without
/// budget (and zero-pctr candidates), ranks by eCPM, prices the top
/// `slots` winners and applies the expected costs to the ledger.
pub fn settle_auction(
    request: &AuctionRequest,
    slots: usize,
    reserve_price: f64,
    ledger: &mut BudgetLedger,
) -> AuctionOutcome {
    let eligible: Vec<CandidateAd> = request
        .candidates
        .iter()
        .filter(|c| c.pctr > 0.0 && ledger.has_budget(c.merchant_id))
        .cloned()
        .collect();
    settle_ranked(&rank_by_ecpm(eligible), slots, reserve_price, ledger)
}

/// Settlement core over an already budget-filtered, eCPM-ranked list.
pub fn settle_ranked(
    ranked: &[CandidateAd],
    slots: usize,
    reserve_price: f64,
    ledger: &mut BudgetLedger,
) -> AuctionOutcome {
    let mut winners = Vec::with_capacity(slots.min(ranked.len()));
    for slot in 0..slots.min(ranked.len()) {
        let c = &ranked[slot];
        let price = gsp_price(ranked, slot, reserve_price);
        debug_assert!(
            price <= c.final_bid + CURRENCY_EPS,
            "GSP price {price} above own bid {}",
            c.final_bid
        );
        let expected_cost = price * c.pctr;
        let expected_revenue = c.pctr * c.pcvr * ledger.get(c.merchant_id).ppb;
        ledger.charge(c.merchant_id, expected_cost);
        winners.push(WinnerRecord {
            merchant_id: c.merchant_id,
            expected_cost,
            expected_revenue,
            expected_click: c.pctr,
        });
    }
    AuctionOutcome { winners, slots }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: MerchantId, bid: f64, pctr: f64) -> CandidateAd {
        CandidateAd {
            merchant_id: id,
            pctr,
            pcvr: 0.0,
            pcvr_avg: 1.0,
            final_bid: bid,
        }
    }

    fn ledger(n: usize, budget: f64, ppb: f64) -> BudgetLedger {
        let profiles = (0..n as u32)
            .map(|id| MerchantProfile {
                merchant_id: id,
                base_bid: 1.0,
                ppb,
                budget,
                budget_remaining: budget,
                cluster_id: 0,
            })
            .collect();
        BudgetLedger::new(profiles).unwrap()
    }

    #[test]
    fn rank_orders_by_bid_times_pctr() {
        // eCPMs 0.20, 0.15, 0.10 in input order: already sorted.
        let input = vec![cand(0, 2.0, 0.10), cand(1, 1.0, 0.15), cand(2, 0.5, 0.20)];
        let ecpms: Vec<f64> = input.iter().map(|c| c.ecpm()).collect();
        assert_eq!(ecpms, vec![0.20, 0.15, 0.10]);
        let ranked = rank_by_ecpm(input.clone());
        assert_eq!(ranked, input);
    }

    #[test]
    fn rank_breaks_ties_by_ascending_id() {
        let ranked = rank_by_ecpm(vec![cand(7, 1.0, 0.1), cand(3, 1.0, 0.1)]);
        let ids: Vec<u32> = ranked.iter().map(|c| c.merchant_id).collect();
        assert_eq!(ids, vec![3, 7]);
    }

    #[test]
    fn rank_single_candidate_is_identity() {
        let ranked = rank_by_ecpm(vec![cand(5, 1.0, 0.2)]);
        assert_eq!(ranked.len(), 1);
        assert_eq!(ranked[0].merchant_id, 5);
    }

    #[test]
    fn rank_empty_is_empty() {
        assert!(rank_by_ecpm(vec![]).is_empty());
    }

    #[test]
    fn gsp_price_uses_next_ranked_ecpm() {
        // winner pctr=0.10; next bid=1.0 pctr=0.15 -> 0.15*1.0/0.10 = 1.5
        let ranked = vec![cand(0, 2.0, 0.10), cand(1, 1.0, 0.15)];
        assert!((gsp_price(&ranked, 0, 0.0) - 1.5).abs() < 1e-12);

        // next bid=2.0 pctr=0.05; winner pctr=0.10 -> 1.0
        let ranked = vec![cand(0, 2.0, 0.10), cand(1, 2.0, 0.05)];
        assert!((gsp_price(&ranked, 0, 0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gsp_price_last_candidate_pays_reserve() {
        let ranked = vec![cand(0, 2.0, 0.10)];
        assert_eq!(gsp_price(&ranked, 0, 0.0), 0.0);
        assert_eq!(gsp_price(&ranked, 0, 0.25), 0.25);
    }

    #[test]
    fn settle_charges_expected_cost_and_credits_expected_revenue() {
        // winner pctr=0.10, gsp price 1.5, pcvr=0.2, ppb=50
        let mut led = ledger(2, 100.0, 50.0);
        let request = AuctionRequest {
            request_id: 0,
            consumer_id: 0,
            consumer_cluster_id: 0,
            timestamp: 0,
            candidates: vec![
                CandidateAd {
                    merchant_id: 0,
                    pctr: 0.10,
                    pcvr: 0.2,
                    pcvr_avg: 0.2,
                    final_bid: 2.0,
                },
                cand(1, 1.0, 0.15),
            ],
        };
        let outcome = settle_auction(&request, 1, 0.0, &mut led);
        assert_eq!(outcome.winners.len(), 1);
        let w = &outcome.winners[0];
        assert!((w.expected_cost - 0.15).abs() < 1e-12);
        assert!((w.expected_revenue - 1.0).abs() < 1e-12);
        assert!((led.get(0).budget_remaining - 99.85).abs() < 1e-12);
        // the loser pays nothing
        assert_eq!(led.get(1).budget_remaining, 100.0);
    }

    #[test]
    fn settle_with_fewer_candidates_than_slots() {
        let mut led = ledger(2, 100.0, 10.0);
        let request = AuctionRequest {
            request_id: 0,
            consumer_id: 0,
            consumer_cluster_id: 0,
            timestamp: 0,
            candidates: vec![cand(0, 2.0, 0.10), cand(1, 1.0, 0.15)],
        };
        let outcome = settle_auction(&request, 3, 0.0, &mut led);
        assert_eq!(outcome.winners.len(), 2);
        // last winner priced at reserve 0
        assert_eq!(outcome.winners[1].expected_cost, 0.0);
    }

    #[test]
    fn settle_skips_exhausted_and_zero_pctr_candidates() {
        let mut led = ledger(3, 100.0, 10.0);
        led.reset_budgets(|id| if id == 0 { 0.0 } else { 100.0 });
        let request = AuctionRequest {
            request_id: 0,
            consumer_id: 0,
            consumer_cluster_id: 0,
            timestamp: 0,
            candidates: vec![cand(0, 9.0, 0.9), cand(1, 1.0, 0.1), cand(2, 1.0, 0.0)],
        };
        let outcome = settle_auction(&request, 3, 0.0, &mut led);
        let ids: Vec<u32> = outcome.winners.iter().map(|w| w.merchant_id).collect();
        assert_eq!(ids, vec![1]);
    }

    #[test]
    fn budget_floor_and_crossing_click() {
        let mut led = ledger(2, 0.1, 10.0);
        // charge above remaining: floored at zero, merchant excluded afterwards
        let before = led.charge(0, 0.5);
        assert!((before - 0.1).abs() < 1e-12);
        assert_eq!(led.get(0).budget_remaining, 0.0);
        assert!(!led.has_budget(0));
    }

    #[test]
    fn ledger_rejects_sparse_ids() {
        let profiles = vec![MerchantProfile {
            merchant_id: 3,
            base_bid: 1.0,
            ppb: 1.0,
            budget: 1.0,
            budget_remaining: 1.0,
            cluster_id: 0,
        }];
        assert!(BudgetLedger::new(profiles).is_err());
    }
}
