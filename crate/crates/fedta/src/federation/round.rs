//! One communication round: local training, server aggregation, election,
//! evaluation, and distribution, in a fixed order so runs replay bitwise.

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, SurrogateSet, TaskPartition};
use crate::encoder::Encoder;
use crate::enhancement::StageOneHyper;
use crate::anchor::StageTwoHyper;
use crate::error::{Error, Result};
use crate::federation::client::{argmax_class, ClientState, InferenceRule};
use crate::federation::messages::{ClientUpdate, GlobalState};
use crate::federation::server::{
    average_bases, average_prototypes, build_similarity_matrix, select_global_prototypes,
    selective_input_knowledge_fusion, ServerConfig, ServerState,
};
use crate::federation::Method;
use crate::metrics::{evaluate, kr_spatial, kr_temporal, AccKey, AccuracyTable, ModelTag};
use crate::numkit::LinearHead;
use crate::seeding::subseed;

/// Everything a round needs that outlives the round.
pub struct RoundContext<'a> {
    pub dataset: &'a Dataset,
    pub partition: &'a TaskPartition,
    pub surrogate: &'a SurrogateSet,
    pub encoder: &'a dyn Encoder,
    pub s1: &'a StageOneHyper,
    pub s2: &'a StageTwoHyper,
    pub server_cfg: &'a ServerConfig,
    pub method: Method,
    pub rule: InferenceRule,
    pub n_select: usize,
    /// Communication rounds per task; every round retrains the current
    /// task locally, so later rounds see the globals elected by earlier
    /// ones.
    pub rounds_per_task: usize,
    pub run_seed: u64,
}

impl RoundContext<'_> {
    pub fn task_of_round(&self, round: usize) -> usize {
        round / self.rounds_per_task
    }

    pub fn total_rounds(&self) -> usize {
        let tasks = self
            .partition
            .clients
            .first()
            .map_or(0, |c| c.tasks.len());
        tasks * self.rounds_per_task
    }
}

/// Appended to the run log once per round.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundLog {
    pub round: usize,
    pub per_client_local_acc: Vec<f64>,
    pub global_acc_per_client: Vec<f64>,
    pub kr_t: f64,
    pub kr_s: f64,
    pub fixed_classes: Vec<u32>,
}

pub fn run_round(
    round: usize,
    clients: &mut [ClientState],
    server: &mut ServerState,
    table: &mut AccuracyTable,
    ctx: &RoundContext<'_>,
) -> Result<RoundLog> {
    if clients.is_empty() {
        return Err(Error::EmptyInput("clients"));
    }
    let task_index = ctx.task_of_round(round);
    let round_seed = subseed(ctx.run_seed, round as u64);

    // local training
    let mut updates: Vec<ClientUpdate> = Vec::with_capacity(clients.len());
    for (i, client) in clients.iter_mut().enumerate() {
        let task = &ctx.partition.clients[i].tasks[task_index];
        updates.push(client.train_task(
            ctx.dataset,
            task,
            ctx.encoder,
            ctx.s1,
            ctx.s2,
            round,
            round % ctx.rounds_per_task != 0,
            subseed(round_seed, 1 + i as u64),
        )?);
    }

    // local accuracies: the first task tracks temporal retention, the
    // current task anchors spatial retention
    let mut per_client_local_acc = Vec::with_capacity(clients.len());
    for (i, client) in clients.iter().enumerate() {
        let tasks = &ctx.partition.clients[i].tasks;
        let first = evaluate(
            |x| client.predict_local(x, ctx.encoder, ctx.s2, ctx.rule),
            ctx.dataset,
            &tasks[0].test_indices,
        )?;
        table.insert(
            AccKey {
                model: ModelTag::Local,
                client: i,
                task: 0,
                round,
            },
            first,
        )?;
        let current = if task_index == 0 {
            first
        } else {
            let acc = evaluate(
                |x| client.predict_local(x, ctx.encoder, ctx.s2, ctx.rule),
                ctx.dataset,
                &tasks[task_index].test_indices,
            )?;
            table.insert(
                AccKey {
                    model: ModelTag::Local,
                    client: i,
                    task: task_index,
                    round,
                },
                acc,
            )?;
            acc
        };
        per_client_local_acc.push(current);
    }

    // aggregation
    let mut averaged_head: Option<LinearHead> = None;
    match ctx.method {
        Method::Fedta | Method::FedtaNoTa | Method::FedtaNoBgps => {
            let bases: Vec<_> = updates.iter().map(|u| u.kb.clone()).collect();
            let fused = if ctx.surrogate.is_empty() {
                average_bases(&bases)?
            } else {
                selective_input_knowledge_fusion(
                    &bases,
                    ctx.dataset,
                    ctx.surrogate,
                    ctx.encoder,
                    ctx.n_select,
                    ctx.server_cfg,
                    subseed(round_seed, 0),
                )?
            };
            server.kb = Some(fused);
        }
        Method::FedtaNoSikf => {
            let bases: Vec<_> = updates.iter().map(|u| u.kb.clone()).collect();
            server.kb = Some(average_bases(&bases)?);
        }
        Method::FedavgHead => {
            averaged_head = Some(average_heads(clients)?);
        }
        Method::FrozenHead => {}
    }
    if ctx.method.is_fedta_variant() {
        server.prototypes = if ctx.method == Method::FedtaNoBgps {
            average_prototypes(&updates, &server.prototypes)?
        } else {
            let matrix = build_similarity_matrix(&updates)?;
            select_global_prototypes(&matrix, &server.prototypes, ctx.server_cfg.thr)?
        };
    }

    // global accuracies on the current task
    let mut global_acc_per_client = Vec::with_capacity(clients.len());
    for (i, client) in clients.iter().enumerate() {
        let test = &ctx.partition.clients[i].tasks[task_index].test_indices;
        let acc = match ctx.method {
            Method::FrozenHead => per_client_local_acc[i],
            Method::FedavgHead => {
                let head = averaged_head.as_ref().expect("set during aggregation");
                evaluate(
                    |x| {
                        let f = client.feature(x, client.kb(), ctx.encoder, ctx.s2)?;
                        argmax_class(&head.logits(&f)?)
                    },
                    ctx.dataset,
                    test,
                )?
            }
            _ => {
                let kb_g = server.kb.as_ref().expect("set during aggregation");
                evaluate(
                    |x| {
                        client.predict_global(
                            x,
                            kb_g,
                            &server.prototypes,
                            ctx.encoder,
                            ctx.s2,
                            ctx.rule,
                        )
                    },
                    ctx.dataset,
                    test,
                )?
            }
        };
        table.insert(
            AccKey {
                model: ModelTag::Global,
                client: i,
                task: task_index,
                round,
            },
            acc,
        )?;
        global_acc_per_client.push(acc);
    }

    let kr_t = kr_temporal(table, clients.len(), round)?;
    let kr_s = kr_spatial(table, clients.len(), round, task_index)?;

    // distribution
    match ctx.method {
        Method::FrozenHead => {}
        Method::FedavgHead => {
            let head = averaged_head.take().expect("set during aggregation");
            for client in clients.iter_mut() {
                client.set_head(head.clone());
            }
        }
        _ => {
            let msg = GlobalState {
                round,
                kb: server.kb.clone().expect("set during aggregation"),
                prototypes: server.prototypes.clone(),
            };
            for client in clients.iter_mut() {
                client.install_global(&msg)?;
            }
        }
    }

    Ok(RoundLog {
        round,
        per_client_local_acc,
        global_acc_per_client,
        kr_t,
        kr_s,
        fixed_classes: server.prototypes.fixed_classes(),
    })
}

/// Elementwise mean of all clients' classification heads.
fn average_heads(clients: &[ClientState]) -> Result<LinearHead> {
    let first = clients.first().ok_or(Error::EmptyInput("clients"))?;
    let mut weight = first.head().weight.clone();
    let mut bias = first.head().bias.clone();
    for client in &clients[1..] {
        weight.add_scaled(&client.head().weight, 1.0)?;
        bias.add_scaled(&client.head().bias, 1.0)?;
    }
    let scale = 1.0 / clients.len() as f64;
    Ok(LinearHead {
        weight: weight.scaled(scale),
        bias: bias.scaled(scale),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_surrogate, partition, synth_gaussian_dataset, PartitionSpec};
    use crate::encoder::{FrozenEncoder, FrozenEncoderSpec};
    use crate::federation::client::ClientParams;
    use crate::federation::client::UnfreezePolicy;

    struct World {
        dataset: Dataset,
        partition: TaskPartition,
        surrogate: SurrogateSet,
        encoder: FrozenEncoder,
        s1: StageOneHyper,
        s2: StageTwoHyper,
        server_cfg: ServerConfig,
    }

    fn world() -> World {
        let dataset = synth_gaussian_dataset(12, 12, 6, 0.05, 41).unwrap();
        let spec = PartitionSpec {
            clients: 2,
            tasks_per_client: 2,
            private_per_client: 2,
            public_total: 2,
            classes_per_task: 2,
            dirichlet_alpha: 0.5,
            test_fraction: 0.25,
        };
        let p = partition(&dataset, &spec, 19).unwrap();
        let surrogate = make_surrogate(&dataset, 2, 23, &p).unwrap();
        World {
            dataset,
            partition: p,
            surrogate,
            encoder: FrozenEncoder::new(FrozenEncoderSpec {
                seed: 8,
                input_dim: 6,
                embed_dim: 4,
                hidden_dim: 5,
                num_base_tokens: 2,
            })
            .unwrap(),
            s1: StageOneHyper {
                epochs: 2,
                batch_size: 4,
                ..StageOneHyper::default()
            },
            s2: StageTwoHyper {
                epochs: 2,
                batch_size: 4,
                ..StageTwoHyper::default()
            },
            server_cfg: ServerConfig::default(),
        }
    }

    fn clients(w: &World, method: Method) -> Vec<ClientState> {
        let params = ClientParams {
            kb_entries: 4,
            tokens_per_ie: 2,
            anchors: 8,
            num_classes: 12,
            feature_dim: 4,
            n_select: 2,
            use_enhancement: method.uses_enhancement(),
            use_anchor: method.uses_anchor(),
            unfreeze: UnfreezePolicy::KeepFixed,
        };
        (0..2)
            .map(|i| ClientState::new(i, &params, subseed(77, 1000 + i as u64)).unwrap())
            .collect()
    }

    fn ctx<'a>(w: &'a World, method: Method) -> RoundContext<'a> {
        RoundContext {
            dataset: &w.dataset,
            partition: &w.partition,
            surrogate: &w.surrogate,
            encoder: &w.encoder,
            s1: &w.s1,
            s2: &w.s2,
            server_cfg: &w.server_cfg,
            method,
            rule: method.forced_rule().unwrap_or(InferenceRule::NearestPrototype),
            n_select: 2,
            rounds_per_task: 1,
            run_seed: 77,
        }
    }

    #[test]
    fn full_run_emits_one_log_per_round() {
        let w = world();
        for method in [
            Method::Fedta,
            Method::FedtaNoTa,
            Method::FedtaNoSikf,
            Method::FedtaNoBgps,
            Method::FedavgHead,
            Method::FrozenHead,
        ] {
            let context = ctx(&w, method);
            let mut cs = clients(&w, method);
            let mut server = ServerState::new();
            let mut table = AccuracyTable::new();
            let mut logs = Vec::new();
            for round in 0..context.total_rounds() {
                logs.push(run_round(round, &mut cs, &mut server, &mut table, &context).unwrap());
            }
            assert_eq!(logs.len(), 2, "{method:?}");
            assert_eq!(logs[0].round, 0);
            assert_eq!(logs[0].kr_t, 1.0, "{method:?}: first-round KR_t must be 1");
            for log in &logs {
                assert_eq!(log.per_client_local_acc.len(), 2);
                assert_eq!(log.global_acc_per_client.len(), 2);
                assert!(log.kr_s.is_finite());
            }
        }
    }

    #[test]
    fn frozen_head_spatial_retention_is_exactly_one() {
        let w = world();
        let context = ctx(&w, Method::FrozenHead);
        let mut cs = clients(&w, Method::FrozenHead);
        let mut server = ServerState::new();
        let mut table = AccuracyTable::new();
        for round in 0..context.total_rounds() {
            let log = run_round(round, &mut cs, &mut server, &mut table, &context).unwrap();
            assert_eq!(log.kr_s, 1.0);
            assert!(log.fixed_classes.is_empty());
        }
    }

    #[test]
    fn rounds_are_deterministic() {
        let w = world();
        let run = || {
            let context = ctx(&w, Method::Fedta);
            let mut cs = clients(&w, Method::Fedta);
            let mut server = ServerState::new();
            let mut table = AccuracyTable::new();
            let mut out = String::new();
            for round in 0..context.total_rounds() {
                let log = run_round(round, &mut cs, &mut server, &mut table, &context).unwrap();
                out.push_str(&serde_json::to_string(&log).unwrap());
                out.push('\n');
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_client_round_adopts_its_own_state() {
        let dataset = synth_gaussian_dataset(4, 12, 6, 0.05, 43).unwrap();
        let spec = PartitionSpec {
            clients: 1,
            tasks_per_client: 2,
            private_per_client: 4,
            public_total: 0,
            classes_per_task: 2,
            dirichlet_alpha: 0.5,
            test_fraction: 0.25,
        };
        let p = partition(&dataset, &spec, 3).unwrap();
        let surrogate = make_surrogate(&dataset, 1, 5, &p).unwrap();
        let encoder = FrozenEncoder::new(FrozenEncoderSpec {
            seed: 8,
            input_dim: 6,
            embed_dim: 4,
            hidden_dim: 5,
            num_base_tokens: 2,
        })
        .unwrap();
        let w = World {
            dataset,
            partition: p,
            surrogate,
            encoder,
            s1: StageOneHyper {
                epochs: 2,
                batch_size: 4,
                ..StageOneHyper::default()
            },
            s2: StageTwoHyper {
                epochs: 2,
                batch_size: 4,
                ..StageTwoHyper::default()
            },
            server_cfg: ServerConfig::default(),
        };
        let context = RoundContext {
            dataset: &w.dataset,
            partition: &w.partition,
            surrogate: &w.surrogate,
            encoder: &w.encoder,
            s1: &w.s1,
            s2: &w.s2,
            server_cfg: &w.server_cfg,
            method: Method::Fedta,
            rule: InferenceRule::NearestPrototype,
            n_select: 2,
            rounds_per_task: 1,
            run_seed: 7,
        };
        let params = ClientParams {
            kb_entries: 4,
            tokens_per_ie: 2,
            anchors: 8,
            num_classes: 4,
            feature_dim: 4,
            n_select: 2,
            use_enhancement: true,
            use_anchor: true,
            unfreeze: UnfreezePolicy::KeepFixed,
        };
        let mut cs = vec![ClientState::new(0, &params, 9).unwrap()];
        let mut server = ServerState::new();
        let mut table = AccuracyTable::new();
        let log = run_round(0, &mut cs, &mut server, &mut table, &context).unwrap();

        // fusing one base is the identity, and each class's only candidate
        // wins the election
        let kb_g = server.kb.as_ref().unwrap();
        assert_eq!(kb_g.to_json().unwrap(), cs[0].kb().to_json().unwrap());
        for (class, v) in cs[0].memory().iter() {
            assert_eq!(
                server.prototypes.get(*class).unwrap().vector.bits(),
                v.bits()
            );
        }
        assert_eq!(log.round, 0);
    }

    #[test]
    fn multiple_rounds_per_task_stay_on_the_same_task() {
        let w = world();
        let mut context = ctx(&w, Method::Fedta);
        context.rounds_per_task = 2;
        let mut cs = clients(&w, Method::Fedta);
        let mut server = ServerState::new();
        let mut table = AccuracyTable::new();
        assert_eq!(context.total_rounds(), 4);
        assert_eq!(context.task_of_round(0), 0);
        assert_eq!(context.task_of_round(1), 0);
        assert_eq!(context.task_of_round(2), 1);
        let log0 = run_round(0, &mut cs, &mut server, &mut table, &context).unwrap();
        let cursor_after = cs[0].task_cursor();
        let log1 = run_round(1, &mut cs, &mut server, &mut table, &context).unwrap();
        assert_eq!(
            cs[0].task_cursor(),
            cursor_after + 1,
            "round 1 retrains the same task"
        );
        assert_eq!(log0.per_client_local_acc.len(), log1.per_client_local_acc.len());
    }
}
