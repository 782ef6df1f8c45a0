//! Device-side agent. It checks in with public attributes only, filters the
//! returned offers against its private attributes locally, and accepts one.

use serde_json::Value;

use crate::control_plane::ControlPlane;
use crate::domain::{AttributeMap, ClientId, Seconds};
use crate::messages::{AcceptStatus, ClientMessage, ClientReply, OfferMsg};

/// Chooses among offers the client is privately eligible for.
pub trait BindingPlugin {
    /// `offers` arrive in the control plane's priority order and have already
    /// been filtered by private constraints. Returns an index into `offers`.
    fn choose(&self, offers: &[&OfferMsg]) -> Option<usize>;
}

/// Takes the highest-priority eligible offer.
#[derive(Clone, Copy, Debug, Default)]
pub struct FirstEligible;

impl BindingPlugin for FirstEligible {
    fn choose(&self, offers: &[&OfferMsg]) -> Option<usize> {
        if offers.is_empty() {
            None
        } else {
            Some(0)
        }
    }
}

/// Prefers jobs in their earliest round, ties broken by priority.
#[derive(Clone, Copy, Debug, Default)]
pub struct PreferSmallestRound;

impl BindingPlugin for PreferSmallestRound {
    fn choose(&self, offers: &[&OfferMsg]) -> Option<usize> {
        offers
            .iter()
            .enumerate()
            .min_by_key(|(i, o)| (o.round, *i))
            .map(|(i, _)| i)
    }
}

/// Offers whose private constraint the client satisfies, in input order.
pub fn eligible<'a>(offers: &'a [OfferMsg], private_attrs: &AttributeMap) -> Vec<&'a OfferMsg> {
    offers
        .iter()
        .filter(|o| o.private_constraint.is_satisfied_by(private_attrs))
        .collect()
}

/// The default local decision: first privately eligible offer.
pub fn default_choose<'a>(offers: &'a [OfferMsg], private_attrs: &AttributeMap) -> Option<&'a OfferMsg> {
    let ok = eligible(offers, private_attrs);
    FirstEligible.choose(&ok).map(|i| ok[i])
}

#[derive(Clone, Debug, PartialEq)]
pub enum SessionOutcome {
    Bound { offer: OfferMsg },
    NoEligibleOffer,
    AllRejected,
}

/// A client agent that talks to a control plane through messages only and
/// keeps a copy of everything it sent.
pub struct ClientAgent<P: BindingPlugin = FirstEligible> {
    pub client_id: ClientId,
    public_attrs: AttributeMap,
    private_attrs: AttributeMap,
    plugin: P,
    sent: Vec<Value>,
}

impl<P: BindingPlugin> ClientAgent<P> {
    pub fn new(client_id: ClientId, public_attrs: AttributeMap, private_attrs: AttributeMap, plugin: P) -> Self {
        Self {
            client_id,
            public_attrs,
            private_attrs,
            plugin,
            sent: Vec::new(),
        }
    }

    fn send(&mut self, cp: &ControlPlane, msg: ClientMessage, now: Seconds) -> ClientReply {
        self.sent.push(serde_json::to_value(&msg).expect("client messages serialize"));
        cp.handle_client(msg, now)
    }

    /// Serialized outbound messages, in send order.
    pub fn sent(&self) -> &[Value] {
        &self.sent
    }

    /// One check-in followed by accept attempts in the plugin's order.
    pub fn session(&mut self, cp: &ControlPlane, now: Seconds) -> SessionOutcome {
        let reply = self.send(
            cp,
            ClientMessage::ClientCheckin {
                client_id: self.client_id,
                public_attrs: self.public_attrs.clone(),
            },
            now,
        );
        let ClientReply::Checkin { offers } = reply else {
            return SessionOutcome::NoEligibleOffer;
        };
        let mut candidates: Vec<OfferMsg> = eligible(&offers, &self.private_attrs).into_iter().cloned().collect();
        if candidates.is_empty() {
            return SessionOutcome::NoEligibleOffer;
        }
        while !candidates.is_empty() {
            let refs: Vec<&OfferMsg> = candidates.iter().collect();
            let Some(i) = self.plugin.choose(&refs) else { break };
            let offer = candidates.remove(i);
            let reply = self.send(
                cp,
                ClientMessage::ClientAccept {
                    client_id: self.client_id,
                    job_id: offer.job_id,
                },
                now,
            );
            if let ClientReply::Accept {
                status: AcceptStatus::Bound,
                ..
            } = reply
            {
                return SessionOutcome::Bound { offer };
            }
        }
        SessionOutcome::AllRejected
    }
}

/// True when no private attribute name appears anywhere in `msg`.
pub fn leaks_no_private_names(msg: &Value, private_attrs: &AttributeMap) -> bool {
    fn walk(v: &Value, names: &[&str]) -> bool {
        match v {
            Value::Object(m) => m.iter().all(|(k, v)| !names.contains(&k.as_str()) && walk(v, names)),
            Value::Array(a) => a.iter().all(|v| walk(v, names)),
            Value::String(s) => !names.contains(&s.as_str()),
            _ => true,
        }
    }
    let names: Vec<&str> = private_attrs.iter().map(|(k, _)| k).collect();
    walk(msg, &names)
}
