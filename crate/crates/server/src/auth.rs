//! Static bearer tokens mapped to roles.

use axum::http::HeaderMap;
use flexext_core::ViewerRole;
use subtle::ConstantTimeEq;

use crate::config::AuthConfig;

/// Who is calling, once the token has been checked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Caller {
    Submitter,
    Staff { id: String, view: ViewerRole, can_write: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Need {
    Submit,
    StaffRead,
    StaffWrite,
}

#[derive(Clone)]
pub struct Auth {
    submission: Vec<u8>,
    staff: Vec<u8>,
    restricted: Option<Vec<u8>>,
}

pub const STAFF_ID_HEADER: &str = "x-staff-id";

fn same(a: &[u8], b: &[u8]) -> bool {
    a.ct_eq(b).into()
}

impl Auth {
    pub fn new(config: &AuthConfig) -> Self {
        Self {
            submission: config.submission_token.as_bytes().to_vec(),
            staff: config.staff_token.as_bytes().to_vec(),
            restricted: config.restricted_staff_token.as_ref().map(|t| t.as_bytes().to_vec()),
        }
    }

    fn identify(&self, headers: &HeaderMap, restricted_view: bool) -> Option<Caller> {
        let value = headers.get(axum::http::header::AUTHORIZATION)?.to_str().ok()?;
        let token = value.strip_prefix("Bearer ")?.trim().as_bytes();
        let staff_id = || {
            headers
                .get(STAFF_ID_HEADER)
                .and_then(|v| v.to_str().ok())
                .map(str::trim)
                .filter(|s| !s.is_empty() && s.len() <= 64)
                .unwrap_or("staff")
                .to_string()
        };
        if same(token, &self.staff) {
            let view = if restricted_view { ViewerRole::Restricted } else { ViewerRole::Full };
            return Some(Caller::Staff { id: staff_id(), view, can_write: true });
        }
        if self.restricted.as_deref().is_some_and(|r| same(token, r)) {
            return Some(Caller::Staff {
                id: staff_id(),
                view: ViewerRole::Restricted,
                can_write: false,
            });
        }
        same(token, &self.submission).then_some(Caller::Submitter)
    }

    /// `None` means forbidden.
    pub fn check(&self, headers: &HeaderMap, restricted_view: bool, need: Need) -> Option<Caller> {
        let caller = self.identify(headers, restricted_view)?;
        let allowed = match (&caller, need) {
            (Caller::Submitter, Need::Submit) => true,
            (Caller::Staff { .. }, Need::StaffRead) => true,
            (Caller::Staff { can_write, .. }, Need::StaffWrite) => *can_write,
            _ => false,
        };
        allowed.then_some(caller)
    }
}
