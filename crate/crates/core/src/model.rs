//! Scenario and offer data model with point arithmetic.
//!
//! Items are unit-granular: a category holds `quantity` identical units and
//! every offer assigns whole units to one side or leaves them undecided.
//! Utilities are additive, integral and non-negative.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points are whole numbers everywhere in the system.
pub type Points = u32;

/// Index of an item category inside a scenario (0-based, contiguous).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub usize);

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// One of the two negotiating parties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Agent,
    Partner,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Agent => Side::Partner,
            Side::Partner => Side::Agent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemCategory {
    pub id: CategoryId,
    pub name: String,
    pub quantity: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceProfile {
    /// Points per unit, keyed by category.
    pub values: BTreeMap<CategoryId, Points>,
    /// Points received when no agreement is reached.
    pub batna: Points,
}

impl PreferenceProfile {
    pub fn value(&self, category: CategoryId) -> Points {
        self.values.get(&category).copied().unwrap_or(0)
    }

    /// Points for holding every unit of every category.
    pub fn max_points(&self, categories: &[ItemCategory]) -> Points {
        categories
            .iter()
            .map(|c| c.quantity * self.value(c.id))
            .sum()
    }

    /// Category ids ordered for conceding: ascending per-unit value, and among
    /// equally valued categories the higher id comes first.
    pub fn concession_order(&self, categories: &[ItemCategory]) -> Vec<CategoryId> {
        let mut ids: Vec<CategoryId> = categories.iter().map(|c| c.id).collect();
        ids.sort_by(|a, b| self.value(*a).cmp(&self.value(*b)).then(b.cmp(a)));
        ids
    }
}

/// A complete negotiation scenario. Serialized in the scenario file format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub deadline_s: u64,
    pub categories: Vec<ItemCategory>,
    pub agent: PreferenceProfile,
    pub partner: PreferenceProfile,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn profile(&self, side: Side) -> &PreferenceProfile {
        match side {
            Side::Agent => &self.agent,
            Side::Partner => &self.partner,
        }
    }

    pub fn deadline_ms(&self) -> u64 {
        self.deadline_s.saturating_mul(1000)
    }

    pub fn total_units(&self) -> u32 {
        self.categories.iter().map(|c| c.quantity).sum()
    }

    pub fn quantity(&self, category: CategoryId) -> Option<u32> {
        self.categories.get(category.0).filter(|c| c.id == category).map(|c| c.quantity)
    }

    /// What one side is allowed to see: the item pool, the deadline and its
    /// own profile. The other side's profile never leaves the scenario.
    pub fn view_for(&self, side: Side) -> ScenarioView {
        ScenarioView {
            name: self.name.clone(),
            deadline_s: self.deadline_s,
            categories: self.categories.clone(),
            side,
            own: self.profile(side).clone(),
        }
    }

    /// Checks every scenario invariant and reports all violations found.
    pub fn validate(&self) -> Vec<Violation> {
        validate_scenario(self)
    }
}

/// One side's information-hidden projection of a [`Scenario`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioView {
    pub name: String,
    pub deadline_s: u64,
    pub categories: Vec<ItemCategory>,
    pub side: Side,
    pub own: PreferenceProfile,
}

impl ScenarioView {
    pub fn deadline_ms(&self) -> u64 {
        self.deadline_s.saturating_mul(1000)
    }

    pub fn own_utility(&self, offer: &Offer) -> Result<Points, ModelError> {
        utility(offer, self.side, &self.own, &self.categories)
    }
}

/// An allocation of units. Units not assigned to either side are undecided.
///
/// Zero entries are never stored, so two offers describing the same
/// allocation compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "OfferRepr", into = "OfferRepr")]
pub struct Offer {
    to_agent: BTreeMap<CategoryId, u32>,
    to_partner: BTreeMap<CategoryId, u32>,
}

#[derive(Serialize, Deserialize)]
struct OfferRepr {
    to_agent: BTreeMap<CategoryId, u32>,
    to_partner: BTreeMap<CategoryId, u32>,
}

impl From<OfferRepr> for Offer {
    fn from(repr: OfferRepr) -> Self {
        let mut offer = Offer::default();
        for (c, n) in repr.to_agent {
            offer.set(Side::Agent, c, n);
        }
        for (c, n) in repr.to_partner {
            offer.set(Side::Partner, c, n);
        }
        offer
    }
}

impl From<Offer> for OfferRepr {
    fn from(offer: Offer) -> Self {
        OfferRepr {
            to_agent: offer.to_agent,
            to_partner: offer.to_partner,
        }
    }
}

impl Offer {
    /// Builds an offer from `(category, units)` lists for each side.
    pub fn new(
        to_agent: impl IntoIterator<Item = (CategoryId, u32)>,
        to_partner: impl IntoIterator<Item = (CategoryId, u32)>,
    ) -> Offer {
        let mut offer = Offer::default();
        for (c, n) in to_agent {
            offer.set(Side::Agent, c, offer.units(Side::Agent, c) + n);
        }
        for (c, n) in to_partner {
            offer.set(Side::Partner, c, offer.units(Side::Partner, c) + n);
        }
        offer
    }

    /// Every unit of every category to `side`.
    pub fn all_to(side: Side, categories: &[ItemCategory]) -> Offer {
        let mut offer = Offer::default();
        for c in categories {
            offer.set(side, c.id, c.quantity);
        }
        offer
    }

    pub fn units(&self, side: Side, category: CategoryId) -> u32 {
        self.side_map(side).get(&category).copied().unwrap_or(0)
    }

    pub fn set(&mut self, side: Side, category: CategoryId, units: u32) {
        let map = match side {
            Side::Agent => &mut self.to_agent,
            Side::Partner => &mut self.to_partner,
        };
        if units == 0 {
            map.remove(&category);
        } else {
            map.insert(category, units);
        }
    }

    pub fn side_map(&self, side: Side) -> &BTreeMap<CategoryId, u32> {
        match side {
            Side::Agent => &self.to_agent,
            Side::Partner => &self.to_partner,
        }
    }

    /// Total units held by `side`, across categories.
    pub fn held(&self, side: Side) -> u32 {
        self.side_map(side).values().sum()
    }

    /// Checks the offer against a pool: known categories, counts within quantity.
    pub fn check(&self, categories: &[ItemCategory]) -> Result<(), ModelError> {
        for side in [Side::Agent, Side::Partner] {
            for c in self.side_map(side).keys() {
                if categories.get(c.0).map(|cat| cat.id) != Some(*c) {
                    return Err(ModelError::OfferScenarioMismatch(format!(
                        "unknown category {c}"
                    )));
                }
            }
        }
        for cat in categories {
            let used = self.units(Side::Agent, cat.id) as u64 + self.units(Side::Partner, cat.id) as u64;
            if used > cat.quantity as u64 {
                return Err(ModelError::OfferScenarioMismatch(format!(
                    "category {} allocates {used} units but only {} exist",
                    cat.id, cat.quantity
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("OFFER_SCENARIO_MISMATCH: {0}")]
    OfferScenarioMismatch(String),
    #[error("NOT_FULL_OFFER")]
    NotFullOffer,
    #[error("INSUFFICIENT_UNITS: need {needed}, side holds {held}")]
    InsufficientUnits { needed: u32, held: u32 },
    #[error("INVALID_ORDER: concession order must be a permutation of the category ids")]
    InvalidOrder,
}

/// Points `side` earns from `offer` under `profile`. Undecided units earn nothing.
pub fn utility(
    offer: &Offer,
    side: Side,
    profile: &PreferenceProfile,
    categories: &[ItemCategory],
) -> Result<Points, ModelError> {
    offer.check(categories)?;
    Ok(offer
        .side_map(side)
        .iter()
        .map(|(c, n)| n * profile.value(*c))
        .sum())
}

/// True iff no unit is left undecided.
pub fn is_full(offer: &Offer, categories: &[ItemCategory]) -> Result<bool, ModelError> {
    offer.check(categories)?;
    Ok(categories.iter().all(|c| {
        offer.units(Side::Agent, c.id) + offer.units(Side::Partner, c.id) == c.quantity
    }))
}

/// Moves `n` units from `from` to the other side, one unit at a time, each
/// taken from the first category in `value_order` that `from` still holds.
pub fn concede_units(
    offer: &Offer,
    from: Side,
    n: u32,
    value_order: &[CategoryId],
    categories: &[ItemCategory],
) -> Result<Offer, ModelError> {
    if !is_full(offer, categories)? {
        return Err(ModelError::NotFullOffer);
    }
    let mut sorted = value_order.to_vec();
    sorted.sort();
    if sorted.len() != categories.len() || sorted.iter().zip(categories).any(|(a, c)| *a != c.id) {
        return Err(ModelError::InvalidOrder);
    }
    let held = offer.held(from);
    if held < n {
        return Err(ModelError::InsufficientUnits { needed: n, held });
    }
    let to = from.other();
    let mut next = offer.clone();
    for _ in 0..n {
        let c = value_order
            .iter()
            .copied()
            .find(|c| next.units(from, *c) > 0)
            .expect("held units checked above");
        next.set(from, c, next.units(from, c) - 1);
        next.set(to, c, next.units(to, c) + 1);
    }
    Ok(next)
}

/// A broken scenario invariant. Violations are data, never errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoCategories,
    IdsNotContiguous { position: usize, found: CategoryId },
    QuantityNonpositive { category: CategoryId },
    MissingValue { side: Side, category: CategoryId },
    UnknownValueCategory { side: Side, category: CategoryId },
    BatnaUnreachable { side: Side, batna: Points, max_points: Points },
    DeadlineNonpositive,
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::NoCategories => "NO_CATEGORIES",
            Violation::IdsNotContiguous { .. } => "IDS_NOT_CONTIGUOUS",
            Violation::QuantityNonpositive { .. } => "QUANTITY_NONPOSITIVE",
            Violation::MissingValue { .. } => "MISSING_VALUE",
            Violation::UnknownValueCategory { .. } => "UNKNOWN_VALUE_CATEGORY",
            Violation::BatnaUnreachable { .. } => "BATNA_UNREACHABLE",
            Violation::DeadlineNonpositive => "DEADLINE_NONPOSITIVE",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side_name = |s: &Side| match s {
            Side::Agent => "agent",
            Side::Partner => "partner",
        };
        match self {
            Violation::NoCategories => write!(f, "{}: scenario has no categories", self.code()),
            Violation::IdsNotContiguous { position, found } => {
                write!(f, "{}: position {position} holds id {}", self.code(), found.0)
            }
            Violation::QuantityNonpositive { category } => {
                write!(f, "{}: category {} has quantity 0", self.code(), category.0)
            }
            Violation::MissingValue { side, category } => write!(
                f,
                "{}: {} profile has no value for category {}",
                self.code(),
                side_name(side),
                category.0
            ),
            Violation::UnknownValueCategory { side, category } => write!(
                f,
                "{}: {} profile values unknown category {}",
                self.code(),
                side_name(side),
                category.0
            ),
            Violation::BatnaUnreachable { side, batna, max_points } => write!(
                f,
                "{}: {} batna {batna} is not below the {max_points} achievable points",
                self.code(),
                side_name(side)
            ),
            Violation::DeadlineNonpositive => write!(f, "{}: deadline must be positive", self.code()),
        }
    }
}

pub fn validate_scenario(scenario: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    if scenario.categories.is_empty() {
        out.push(Violation::NoCategories);
    }
    for (i, c) in scenario.categories.iter().enumerate() {
        if c.id.0 != i {
            out.push(Violation::IdsNotContiguous { position: i, found: c.id });
        }
        if c.quantity == 0 {
            out.push(Violation::QuantityNonpositive { category: c.id });
        }
    }
    for side in [Side::Agent, Side::Partner] {
        let profile = scenario.profile(side);
        for c in &scenario.categories {
            if !profile.values.contains_key(&c.id) {
                out.push(Violation::MissingValue { side, category: c.id });
            }
        }
        for id in profile.values.keys() {
            if !scenario.categories.iter().any(|c| c.id == *id) {
                out.push(Violation::UnknownValueCategory { side, category: *id });
            }
        }
        let max_points = profile.max_points(&scenario.categories);
        if profile.batna >= max_points {
            out.push(Violation::BatnaUnreachable {
                side,
                batna: profile.batna,
                max_points,
            });
        }
    }
    if scenario.deadline_s == 0 {
        out.push(Violation::DeadlineNonpositive);
    }
    out
}
