//! Deterministic fixtures: a small consortium with keys derived from a seed,
//! and helpers that build signed governance and application requests.
//!
//! Used by the test suites, the benchmark harness and the browser demo.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Value};

use crate::crypto::KeyPair;
use crate::enclave::{code_blob, measure, quote, AttestationQuote, Measurement, Platform};
use crate::governance::{ballot_path, Action, Ballot, Constitution, Genesis, MemberSpec, NodeInfo, PROPOSALS_PATH};
use crate::service::{Applied, JoinRequest, Service, ServiceCommand, ServiceError, ServiceSecrets, SignedRequest};
use crate::settlement::{Party, PartyRole, TokenModel};

pub const PLATFORM_ID: &str = "emu-platform-0";
pub const BUILD_ID: &str = "conledger-node/1";

pub struct Consortium {
    pub members: Vec<(String, KeyPair)>,
    pub parties: Vec<(Party, KeyPair)>,
    pub platform: Platform,
    pub measurement: Measurement,
    pub node_key: KeyPair,
    pub secrets: ServiceSecrets,
    pub confidential: bool,
}

impl Consortium {
    /// Three members, a central bank `cb`, intermediaries `bankA`/`bankB`
    /// and clients `client1` (of bankA) and `client2` (of bankB).
    pub fn new(seed: u64, confidential: bool) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let members = (0..3).map(|i| (format!("member{i}"), KeyPair::generate(&mut rng))).collect();
        let party = |id: &str, role, intermediary: Option<&str>, rng: &mut ChaCha20Rng| {
            let k = KeyPair::generate(rng);
            (Party { party_id: id.into(), role, public_key: k.public(), intermediary: intermediary.map(Into::into) }, k)
        };
        let parties = vec![
            party("cb", PartyRole::CentralBank, None, &mut rng),
            party("bankA", PartyRole::Intermediary, None, &mut rng),
            party("bankB", PartyRole::Intermediary, None, &mut rng),
            party("client1", PartyRole::Client, Some("bankA"), &mut rng),
            party("client2", PartyRole::Client, Some("bankB"), &mut rng),
        ];
        let platform = Platform::generate(PLATFORM_ID, &mut rng);
        let measurement = measure(&code_blob(b"settlement-app", BUILD_ID));
        let node_key = KeyPair::generate(&mut rng);
        let secrets = ServiceSecrets::generate(&mut rng);
        Consortium { members, parties, platform, measurement, node_key, secrets, confidential }
    }

    pub fn member_key(&self, id: &str) -> &KeyPair {
        &self.members.iter().find(|(m, _)| m == id).expect("known member").1
    }

    pub fn party_key(&self, id: &str) -> &KeyPair {
        &self.parties.iter().find(|(p, _)| p.party_id == id).expect("known party").1
    }

    pub fn first_node(&self) -> NodeInfo {
        let mut n = NodeInfo::new(self.node_key.public(), "127.0.0.1:7000", "127.0.0.1:8000");
        n.measurement = Some(self.measurement);
        n.platform_id = Some(PLATFORM_ID.into());
        n
    }

    pub fn genesis(&self) -> Genesis {
        Genesis {
            constitution: Constitution::default(),
            members: self.members.iter().map(|(id, k)| MemberSpec { member_id: id.clone(), public_key: k.public() }).collect(),
            service_identity: self.secrets.signing_key.public(),
            trusted_platforms: [(PLATFORM_ID.to_string(), self.platform.public_key())].into(),
            trusted_measurements: [self.measurement].into(),
            confidential_mode: self.confidential,
            allowed_nodes: [self.node_key.public()].into(),
            first_node: self.first_node(),
        }
    }

    pub fn policy(&self, model: TokenModel) -> Value {
        json!({ "model": model, "parties": self.parties.iter().map(|(p, _)| p).collect::<Vec<_>>() })
    }

    pub fn propose(&self, member: &str, action: &Action) -> SignedRequest {
        SignedRequest::sign(PROPOSALS_PATH, json!({ "action": action }), member, self.member_key(member))
    }

    pub fn ballot(&self, member: &str, proposal_id: u64, ballot: Ballot) -> SignedRequest {
        SignedRequest::sign(ballot_path(proposal_id), json!({ "ballot": ballot }), member, self.member_key(member))
    }

    /// A proposal by member0 followed by yes ballots from member0 and member1,
    /// which is enough under the default strict majority.
    pub fn passing(&self, proposal_id: u64, action: &Action) -> Vec<SignedRequest> {
        vec![
            self.propose("member0", action),
            self.ballot("member0", proposal_id, Ballot::Yes),
            self.ballot("member1", proposal_id, Ballot::Yes),
        ]
    }

    /// Genesis, app policy registration (proposal 0) and opening (proposal 1).
    pub fn bootstrap(&self, model: TokenModel) -> Vec<ServiceCommand> {
        let mut cmds = vec![ServiceCommand::Genesis { genesis: self.genesis() }];
        let actions = [Action::RegisterAppPolicy { policy: self.policy(model) }, Action::TransitionServiceToOpen];
        for (id, a) in actions.iter().enumerate() {
            cmds.extend(self.passing(id as u64, a).into_iter().map(|request| ServiceCommand::Request { request }));
        }
        cmds
    }

    /// An application request signed by `party`.
    pub fn app(&self, party: &str, path: &str, body: Value) -> SignedRequest {
        SignedRequest::sign(path, body, party, self.party_key(party))
    }

    pub fn app_cosigned(&self, party: &str, cosigner: &str, path: &str, body: Value) -> SignedRequest {
        self.app(party, path, body).cosign(cosigner, self.party_key(cosigner))
    }

    /// A join request for a fresh node identity attested by `platform`.
    pub fn join_request(&self, node_key: &KeyPair, platform: &Platform, measurement: Measurement, port: u16) -> JoinRequest {
        JoinRequest {
            node_identity: node_key.public(),
            node_address: format!("127.0.0.1:{port}"),
            rpc_address: format!("127.0.0.1:{}", port + 1000),
            quote: Some(self.quote_for(node_key, platform, measurement)),
            exchange_key: hex::encode([0u8; 32]),
        }
    }

    pub fn quote_for(&self, node_key: &KeyPair, platform: &Platform, measurement: Measurement) -> AttestationQuote {
        quote(measurement, node_key.public(), platform)
    }
}

/// A single service with a running command index, applying commands as a
/// one-node cluster would.
pub struct Harness {
    pub svc: Service,
    pub next_index: u64,
}

impl Harness {
    pub fn new(svc: Service) -> Self {
        let next_index = svc.applied_index() + 1;
        Harness { svc, next_index }
    }

    pub fn apply(&mut self, cmd: &ServiceCommand) -> Result<Applied, ServiceError> {
        let bytes = serde_json::to_vec(cmd).expect("commands serialize");
        let index = self.next_index;
        self.next_index += 1;
        self.svc.apply(index, &bytes)
    }

    pub fn request(&mut self, request: SignedRequest) -> Result<Applied, ServiceError> {
        self.apply(&ServiceCommand::Request { request })
    }
}
