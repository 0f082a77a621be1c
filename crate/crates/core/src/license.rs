//! ccREL license vocabulary, its one-byte numeric encoding, and the
//! per-action compliance decision.
//!
//! | bit | meaning                    |
//! |-----|----------------------------|
//! | 0   | permits Reproduction       |
//! | 1   | permits Distribution       |
//! | 2   | permits Derivation         |
//! | 3   | prohibits CommercialUse    |
//! | 4   | requires Notice            |
//! | 5   | requires Attribution       |
//! | 6   | requires ShareAlike        |
//! | 7   | requires SourceCode        |
//!
//! ShareAlike only constrains redistributed derivatives, so a code with
//! bit 6 set and bit 2 clear is rejected.

use std::fmt;
use std::str::FromStr;

use bitflags::bitflags;
use serde::{Deserialize, Serialize};
use thiserror::Error;

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct Permits: u8 {
        const REPRODUCTION = 1 << 0;
        const DISTRIBUTION = 1 << 1;
        const DERIVATION = 1 << 2;
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct Prohibits: u8 {
        const COMMERCIAL_USE = 1 << 0;
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct Requires: u8 {
        const NOTICE = 1 << 0;
        const ATTRIBUTION = 1 << 1;
        const SHARE_ALIKE = 1 << 2;
        const SOURCE_CODE = 1 << 3;
    }
}

/// Compact on-chain license encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LicenseCode(pub u8);

impl LicenseCode {
    pub fn value(self) -> u8 {
        self.0
    }
}

impl fmt::Display for LicenseCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LicenseError {
    #[error("share-alike requires derivation to be permitted")]
    InvalidTerms,
    #[error("license code {0} out of range 0..256")]
    OutOfRange(i64),
    #[error("license code {0} requires share-alike without permitting derivation")]
    InvalidCombination(u8),
    #[error("cannot parse license code `{0}`")]
    Unparsable(String),
}

/// The permission, prohibition and requirement sets of a ccREL license.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LicenseTerms {
    pub permits: Permits,
    pub prohibits: Prohibits,
    pub requires: Requires,
}

impl LicenseTerms {
    /// CC BY-NC 4.0: all three permissions, no commercial use, notice and
    /// attribution required.
    pub fn cc_by_nc() -> Self {
        LicenseTerms { permits: Permits::all(), prohibits: Prohibits::COMMERCIAL_USE, requires: Requires::NOTICE | Requires::ATTRIBUTION }
    }

    pub fn validate(&self) -> Result<(), LicenseError> {
        if self.requires.contains(Requires::SHARE_ALIKE) && !self.permits.contains(Permits::DERIVATION) {
            return Err(LicenseError::InvalidTerms);
        }
        Ok(())
    }
}

/// Human-facing companion of the terms: the Legal Code pointer.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LicenseDeed {
    pub legal_code_url: String,
    pub jurisdiction: Option<String>,
}

pub fn encode_license(terms: &LicenseTerms) -> Result<LicenseCode, LicenseError> {
    terms.validate()?;
    Ok(LicenseCode(terms.permits.bits() | (terms.prohibits.bits() << 3) | (terms.requires.bits() << 4)))
}

pub fn decode_license(code: i64) -> Result<LicenseTerms, LicenseError> {
    let byte = u8::try_from(code).map_err(|_| LicenseError::OutOfRange(code))?;
    let terms = LicenseTerms {
        permits: Permits::from_bits_truncate(byte),
        prohibits: Prohibits::from_bits_truncate(byte >> 3),
        requires: Requires::from_bits_truncate(byte >> 4),
    };
    terms.validate().map_err(|_| LicenseError::InvalidCombination(byte))?;
    Ok(terms)
}

impl LicenseCode {
    pub fn terms(self) -> Result<LicenseTerms, LicenseError> {
        decode_license(self.0 as i64)
    }
}

impl FromStr for LicenseCode {
    type Err = LicenseError;

    /// Parses a decimal code and checks it decodes to valid terms.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let n: i64 = s.trim().parse().map_err(|_| LicenseError::Unparsable(s.to_owned()))?;
        decode_license(n)?;
        Ok(LicenseCode(n as u8))
    }
}

/// Descriptive properties of the licensed work.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WorkProperties {
    pub title: String,
    pub attribution_name: String,
    pub attribution_url: String,
    pub work_type: String,
    pub source_url: Option<String>,
    pub more_permissions_url: Option<String>,
}

impl WorkProperties {
    pub fn validate_for(&self, terms: &LicenseTerms) -> Result<(), String> {
        if terms.requires.contains(Requires::ATTRIBUTION)
            && (self.title.trim().is_empty() || self.attribution_name.trim().is_empty())
        {
            return Err("attribution requires a title and an attribution name".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionKind {
    Read,
    Reproduce,
    Distribute,
    Derive,
    ShareDerivative,
    CommercialUse,
}

impl ActionKind {
    pub const ALL: [ActionKind; 6] = [
        ActionKind::Read,
        ActionKind::Reproduce,
        ActionKind::Distribute,
        ActionKind::Derive,
        ActionKind::ShareDerivative,
        ActionKind::CommercialUse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Read => "read",
            ActionKind::Reproduce => "reproduce",
            ActionKind::Distribute => "distribute",
            ActionKind::Derive => "derive",
            ActionKind::ShareDerivative => "share-derivative",
            ActionKind::CommercialUse => "commercial-use",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown action `{s}`"))
    }
}

/// A declared action on the data, as observed by the monitor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DataAction {
    kind: ActionKind,
    carried_notice: bool,
    carried_attribution: bool,
    derivative_license: Option<LicenseCode>,
}

impl DataAction {
    /// `derivative_license` must be given exactly when `kind` is
    /// [`ActionKind::ShareDerivative`].
    pub fn new(
        kind: ActionKind,
        carried_notice: bool,
        carried_attribution: bool,
        derivative_license: Option<LicenseCode>,
    ) -> Result<Self, String> {
        if (kind == ActionKind::ShareDerivative) != derivative_license.is_some() {
            return Err("a derivative license is required for, and only for, share-derivative".into());
        }
        Ok(DataAction { kind, carried_notice, carried_attribution, derivative_license })
    }

    /// An action without requirement flags. Panics for `ShareDerivative`.
    pub fn plain(kind: ActionKind) -> Self {
        Self::new(kind, false, false, None).expect("plain actions carry no derivative license")
    }

    pub fn share_derivative(derivative: LicenseCode, notice: bool, attribution: bool) -> Self {
        DataAction { kind: ActionKind::ShareDerivative, carried_notice: notice, carried_attribution: attribution, derivative_license: Some(derivative) }
    }

    pub fn with_notice(mut self, yes: bool) -> Self {
        self.carried_notice = yes;
        self
    }

    pub fn with_attribution(mut self, yes: bool) -> Self {
        self.carried_attribution = yes;
        self
    }

    pub fn kind(&self) -> ActionKind {
        self.kind
    }

    pub fn carried_notice(&self) -> bool {
        self.carried_notice
    }

    pub fn carried_attribution(&self) -> bool {
        self.carried_attribution
    }

    pub fn derivative_license(&self) -> Option<LicenseCode> {
        self.derivative_license
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationReason {
    ReproductionNotPermitted,
    DistributionNotPermitted,
    DerivationNotPermitted,
    MissingNotice,
    MissingAttribution,
    ShareAlike,
    CommercialUseProhibited,
}

impl ViolationReason {
    pub const ALL: [ViolationReason; 7] = [
        ViolationReason::ReproductionNotPermitted,
        ViolationReason::DistributionNotPermitted,
        ViolationReason::DerivationNotPermitted,
        ViolationReason::MissingNotice,
        ViolationReason::MissingAttribution,
        ViolationReason::ShareAlike,
        ViolationReason::CommercialUseProhibited,
    ];

    /// Stable token used in event-log lines.
    pub fn slug(self) -> &'static str {
        match self {
            ViolationReason::ReproductionNotPermitted => "reproduction-not-permitted",
            ViolationReason::DistributionNotPermitted => "distribution-not-permitted",
            ViolationReason::DerivationNotPermitted => "derivation-not-permitted",
            ViolationReason::MissingNotice => "missing-notice",
            ViolationReason::MissingAttribution => "missing-attribution",
            ViolationReason::ShareAlike => "share-alike",
            ViolationReason::CommercialUseProhibited => "commercial-use-prohibited",
        }
    }

    pub fn from_slug(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.slug() == s)
    }
}

impl fmt::Display for ViolationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationReason::ReproductionNotPermitted => "reproduction not permitted",
            ViolationReason::DistributionNotPermitted => "distribution not permitted",
            ViolationReason::DerivationNotPermitted => "derivation not permitted",
            ViolationReason::MissingNotice => "notice required",
            ViolationReason::MissingAttribution => "attribution required",
            ViolationReason::ShareAlike => "share-alike",
            ViolationReason::CommercialUseProhibited => "commercial use prohibited",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Compliant,
    Violation(ViolationReason),
}

impl Verdict {
    pub fn is_compliant(&self) -> bool {
        matches!(self, Verdict::Compliant)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Compliant => f.write_str("compliant"),
            Verdict::Violation(r) => write!(f, "violation: {r}"),
        }
    }
}

fn distribution_conditions(action: &DataAction, terms: &LicenseTerms) -> Result<(), ViolationReason> {
    if !terms.permits.contains(Permits::DISTRIBUTION) {
        return Err(ViolationReason::DistributionNotPermitted);
    }
    if terms.requires.contains(Requires::NOTICE) && !action.carried_notice {
        return Err(ViolationReason::MissingNotice);
    }
    if terms.requires.contains(Requires::ATTRIBUTION) && !action.carried_attribution {
        return Err(ViolationReason::MissingAttribution);
    }
    Ok(())
}

/// Decides whether `action` complies with `terms`.
pub fn check_action(action: &DataAction, terms: &LicenseTerms) -> Verdict {
    let outcome = match action.kind {
        ActionKind::Read => Ok(()),
        ActionKind::Reproduce => {
            if terms.permits.contains(Permits::REPRODUCTION) {
                Ok(())
            } else {
                Err(ViolationReason::ReproductionNotPermitted)
            }
        }
        ActionKind::Distribute => distribution_conditions(action, terms),
        ActionKind::Derive => {
            if terms.permits.contains(Permits::DERIVATION) {
                Ok(())
            } else {
                Err(ViolationReason::DerivationNotPermitted)
            }
        }
        ActionKind::ShareDerivative => {
            if !terms.permits.contains(Permits::DERIVATION) {
                Err(ViolationReason::DerivationNotPermitted)
            } else {
                distribution_conditions(action, terms).and_then(|()| {
                    let same = encode_license(terms).ok() == action.derivative_license;
                    if terms.requires.contains(Requires::SHARE_ALIKE) && !same {
                        Err(ViolationReason::ShareAlike)
                    } else {
                        Ok(())
                    }
                })
            }
        }
        ActionKind::CommercialUse => {
            if terms.prohibits.contains(Prohibits::COMMERCIAL_USE) {
                Err(ViolationReason::CommercialUseProhibited)
            } else {
                Ok(())
            }
        }
    };
    match outcome {
        Ok(()) => Verdict::Compliant,
        Err(r) => Verdict::Violation(r),
    }
}

/// Name of the Creative Commons attribution license a code matches, if any.
/// All six keep reproduction, distribution, notice and attribution.
pub fn cc_name(code: LicenseCode) -> Option<&'static str> {
    Some(match code.0 {
        55 => "CC-BY",
        119 => "CC-BY-SA",
        51 => "CC-BY-ND",
        63 => "CC-BY-NC",
        127 => "CC-BY-NC-SA",
        59 => "CC-BY-NC-ND",
        _ => return None,
    })
}

/// Three-section summary in the style of a Commons Deed.
pub fn render_deed(code: LicenseCode, terms: &LicenseTerms) -> String {
    fn section<'a>(title: &str, items: impl Iterator<Item = &'a str>) -> String {
        let items: Vec<&str> = items.collect();
        if items.is_empty() {
            format!("{title}: (none)\n")
        } else {
            format!("{title}: {}\n", items.join(", "))
        }
    }
    let mut out = match cc_name(code) {
        Some(name) => format!("license code {code} ({:#010b}) {name}\n", code.0),
        None => format!("license code {code} ({:#010b})\n", code.0),
    };
    out += &section(
        "Permits",
        [(Permits::REPRODUCTION, "Reproduction"), (Permits::DISTRIBUTION, "Distribution"), (Permits::DERIVATION, "Derivation")]
            .into_iter()
            .filter(|(f, _)| terms.permits.contains(*f))
            .map(|(_, n)| n),
    );
    out += &section(
        "Prohibits",
        [(Prohibits::COMMERCIAL_USE, "CommercialUse")].into_iter().filter(|(f, _)| terms.prohibits.contains(*f)).map(|(_, n)| n),
    );
    out += &section(
        "Requires",
        [
            (Requires::NOTICE, "Notice"),
            (Requires::ATTRIBUTION, "Attribution"),
            (Requires::SHARE_ALIKE, "ShareAlike"),
            (Requires::SOURCE_CODE, "SourceCode"),
        ]
        .into_iter()
        .filter(|(f, _)| terms.requires.contains(*f))
        .map(|(_, n)| n),
    );
    out
}
