//! The Yellow Pages: dataset discovery over simplified ADA-M profiles.
//!
//! Profiles are exchanged as TOML:
//!
//! ```toml
//! profile_id = "cohort-1"
//! created_at = 0
//! data_description = "diabetes cohort, anonymized"
//! provider_name = "provider"
//!
//! [permissions]
//! allowed_purposes = ["general-research", "disease-specific"]
//! purpose_detail = "type-2 diabetes"
//!
//! [terms]
//! jurisdiction = "EU"
//!
//! [meta_conditions]
//! contains_personal_data = true
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::{ContractError, Platform};
use crate::ledger::{ContractAddress, NodeId, Tick};
use crate::license::LicenseCode;

pub const MAX_PURPOSE_DETAIL: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PurposeKind {
    GeneralResearch,
    DiseaseSpecific,
    MethodDevelopment,
    Commercial,
}

impl PurposeKind {
    pub const ALL: [PurposeKind; 4] =
        [PurposeKind::GeneralResearch, PurposeKind::DiseaseSpecific, PurposeKind::MethodDevelopment, PurposeKind::Commercial];

    pub fn as_str(self) -> &'static str {
        match self {
            PurposeKind::GeneralResearch => "general-research",
            PurposeKind::DiseaseSpecific => "disease-specific",
            PurposeKind::MethodDevelopment => "method-development",
            PurposeKind::Commercial => "commercial",
        }
    }
}

impl fmt::Display for PurposeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PurposeKind {
    type Err = RegistryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| RegistryError::UnknownPurpose(s.to_owned()))
    }
}

/// A purpose of use: a controlled tag plus free-text detail.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PurposeTag {
    pub tag: PurposeKind,
    pub detail: String,
}

impl PurposeTag {
    pub fn new(tag: PurposeKind, detail: impl Into<String>) -> Result<Self, RegistryError> {
        let detail = detail.into();
        if detail.chars().count() > MAX_PURPOSE_DETAIL {
            return Err(RegistryError::DetailTooLong);
        }
        Ok(PurposeTag { tag, detail })
    }

    /// `tag` or `tag:detail`.
    pub fn parse(s: &str) -> Result<Self, RegistryError> {
        match s.split_once(':') {
            Some((tag, detail)) => Self::new(tag.parse()?, detail),
            None => Self::new(s.parse()?, ""),
        }
    }
}

impl fmt::Display for PurposeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.detail.is_empty() {
            write!(f, "{}", self.tag)
        } else {
            write!(f, "{}:{}", self.tag, self.detail)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileHeader {
    pub profile_id: String,
    #[serde(default)]
    pub created_at: Tick,
    pub data_description: String,
    pub provider_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProfilePermissions {
    #[serde(default)]
    pub allowed_purposes: BTreeSet<PurposeKind>,
    #[serde(default)]
    pub purpose_detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProfileTerms {
    /// Filled in from the published license when absent.
    #[serde(default)]
    pub license_code: Option<LicenseCode>,
    #[serde(default)]
    pub jurisdiction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetaConditions {
    #[serde(default)]
    pub contains_personal_data: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdamProfile {
    #[serde(flatten)]
    pub header: ProfileHeader,
    #[serde(default)]
    pub permissions: ProfilePermissions,
    #[serde(default)]
    pub terms: ProfileTerms,
    #[serde(default)]
    pub meta_conditions: MetaConditions,
}

impl AdamProfile {
    pub fn validate(&self) -> Result<(), RegistryError> {
        if self.header.profile_id.trim().is_empty() {
            return Err(RegistryError::InvalidProfile("empty profile_id".into()));
        }
        if self.meta_conditions.contains_personal_data && self.permissions.allowed_purposes.is_empty() {
            return Err(RegistryError::InvalidProfile(
                "personal data requires at least one allowed purpose".into(),
            ));
        }
        if self.permissions.purpose_detail.chars().count() > MAX_PURPOSE_DETAIL {
            return Err(RegistryError::DetailTooLong);
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, RegistryError> {
        toml::from_str(text).map_err(|e| RegistryError::InvalidProfile(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("profiles always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetId(pub String);

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DatasetId {
    fn from(s: &str) -> Self {
        DatasetId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct YellowPageEntry {
    pub dataset_id: DatasetId,
    pub profile: AdamProfile,
    pub license_type: LicenseCode,
    pub provider_name: String,
    pub provider: NodeId,
    pub contract_address: ContractAddress,
    pub link: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("profile id `{0}` already listed")]
    DuplicateProfileId(String),
    #[error("unknown purpose `{0}`")]
    UnknownPurpose(String),
    #[error("purpose detail exceeds {MAX_PURPOSE_DETAIL} characters")]
    DetailTooLong,
    #[error("unknown dataset {0}")]
    UnknownDataset(DatasetId),
    #[error(transparent)]
    Contract(#[from] ContractError),
}

/// Publication parameters besides the profile itself.
#[derive(Debug, Clone)]
pub struct Listing {
    pub license: LicenseCode,
    pub link: String,
    pub period: Tick,
}

#[derive(Debug, Default)]
pub struct Registry {
    entries: BTreeMap<DatasetId, YellowPageEntry>,
    next: u64,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Lists the profile and creates its dataset contract in the same step.
    pub fn publish_profile(
        &mut self,
        platform: &mut Platform,
        provider: &NodeId,
        mut profile: AdamProfile,
        listing: Listing,
        now: Tick,
    ) -> Result<DatasetId, RegistryError> {
        profile.validate()?;
        if self.entries.values().any(|e| e.profile.header.profile_id == profile.header.profile_id) {
            return Err(RegistryError::DuplicateProfileId(profile.header.profile_id));
        }
        profile.terms.license_code = Some(listing.license);
        let address = platform.publish_dataset(
            provider,
            &profile.header.data_description,
            &listing.link,
            listing.license,
            listing.period,
            now,
        )?;
        self.next += 1;
        let dataset_id = DatasetId(format!("ds-{}", self.next));
        let entry = YellowPageEntry {
            dataset_id: dataset_id.clone(),
            provider_name: profile.header.provider_name.clone(),
            profile,
            license_type: listing.license,
            provider: provider.clone(),
            contract_address: address,
            link: listing.link,
        };
        self.entries.insert(dataset_id.clone(), entry);
        Ok(dataset_id)
    }

    /// Entries whose description or purpose detail contains every keyword,
    /// case-insensitively, in dataset-id order.
    pub fn query<S: AsRef<str>>(&self, keywords: &[S]) -> Vec<&YellowPageEntry> {
        let needles: Vec<String> = keywords.iter().map(|k| k.as_ref().to_lowercase()).collect();
        self.entries
            .values()
            .filter(|e| {
                let desc = e.profile.header.data_description.to_lowercase();
                let detail = e.profile.permissions.purpose_detail.to_lowercase();
                needles.iter().all(|k| desc.contains(k.as_str()) || detail.contains(k.as_str()))
            })
            .collect()
    }

    pub fn get(&self, id: &DatasetId) -> Result<&YellowPageEntry, RegistryError> {
        self.entries.get(id).ok_or_else(|| RegistryError::UnknownDataset(id.clone()))
    }

    pub fn by_contract(&self, address: &ContractAddress) -> Option<&YellowPageEntry> {
        self.entries.values().find(|e| &e.contract_address == address)
    }

    pub fn entries(&self) -> impl Iterator<Item = &YellowPageEntry> {
        self.entries.values()
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::tests::platform_with;
    use crate::ledger::Role;

    pub(crate) fn profile(id: &str, desc: &str, personal: bool, purposes: &[PurposeKind]) -> AdamProfile {
        AdamProfile {
            header: ProfileHeader {
                profile_id: id.into(),
                created_at: 0,
                data_description: desc.into(),
                provider_name: "Hospital A".into(),
            },
            permissions: ProfilePermissions { allowed_purposes: purposes.iter().copied().collect(), purpose_detail: String::new() },
            terms: ProfileTerms::default(),
            meta_conditions: MetaConditions { contains_personal_data: personal },
        }
    }

    fn listing() -> Listing {
        Listing { license: LicenseCode(63), link: "repo://d1".into(), period: 10 }
    }

    #[test]
    fn publish_creates_resolvable_contract() {
        let mut p = platform_with(&[("provider", Role::Provider)]);
        let mut reg = Registry::new();
        let id = reg
            .publish_profile(&mut p, &"provider".into(), profile("p1", "Cohort one", true, &[PurposeKind::GeneralResearch]), listing(), 0)
            .unwrap();
        let entry = reg.get(&id).unwrap();
        let contract = p.contracts().get(&entry.contract_address).unwrap();
        assert_eq!(contract.license_code, entry.license_type);
        assert_eq!(entry.profile.terms.license_code, Some(LicenseCode(63)));
    }

    #[test]
    fn personal_data_needs_purposes() {
        let mut p = platform_with(&[("provider", Role::Provider)]);
        let mut reg = Registry::new();
        let err = reg.publish_profile(&mut p, &"provider".into(), profile("p1", "x", true, &[]), listing(), 0).unwrap_err();
        assert!(matches!(err, RegistryError::InvalidProfile(_)));
        assert!(p.ledger().pending().is_empty());
    }

    #[test]
    fn duplicate_profile_id() {
        let mut p = platform_with(&[("provider", Role::Provider)]);
        let mut reg = Registry::new();
        reg.publish_profile(&mut p, &"provider".into(), profile("p1", "x", false, &[]), listing(), 0).unwrap();
        let err = reg.publish_profile(&mut p, &"provider".into(), profile("p1", "y", false, &[]), listing(), 0).unwrap_err();
        assert_eq!(err, RegistryError::DuplicateProfileId("p1".into()));
    }

    #[test]
    fn query_filters() {
        let mut p = platform_with(&[("provider", Role::Provider)]);
        let mut reg = Registry::new();
        reg.publish_profile(&mut p, &"provider".into(), profile("p1", "Diabetes Cohort", false, &[]), listing(), 0).unwrap();
        reg.publish_profile(&mut p, &"provider".into(), profile("p2", "imaging archive", false, &[]), listing(), 0).unwrap();
        assert_eq!(reg.query(&["cohort"]).len(), 1);
        assert_eq!(reg.query::<&str>(&[]).len(), 2);
        assert!(reg.query(&["nonexistent-term"]).is_empty());
        assert_eq!(reg.query(&["COHORT", "diabetes"])[0].dataset_id, DatasetId::from("ds-1"));
    }

    #[test]
    fn purpose_parsing() {
        let p = PurposeTag::parse("disease-specific:type 2 diabetes").unwrap();
        assert_eq!(p.tag, PurposeKind::DiseaseSpecific);
        assert_eq!(p.to_string(), "disease-specific:type 2 diabetes");
        assert!(PurposeTag::parse("marketing").is_err());
        assert_eq!(PurposeTag::new(PurposeKind::Commercial, "x".repeat(513)), Err(RegistryError::DetailTooLong));
    }

    #[test]
    fn profile_toml_roundtrip() {
        let mut p = profile("p1", "Cohort", true, &[PurposeKind::GeneralResearch, PurposeKind::Commercial]);
        p.terms.jurisdiction = Some("EU".into());
        let back = AdamProfile::from_toml(&p.to_toml()).unwrap();
        assert_eq!(back, p);
    }
}
