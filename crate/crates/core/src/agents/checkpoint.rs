//! Agent checkpointing: a JSON header line describing the agent and its
//! sections, followed by every section's values as little-endian f64.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{Agent, AgentConfig, InputBuilder, PolicyNets};
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct SectionHeader {
    name: String,
    len: usize,
    /// Optimizer step counter for optimizer-state sections.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    index: usize,
    seed: u64,
    n: usize,
    l: usize,
    config: AgentConfig,
    noise_sigma: f64,
    noise_state: Vec<f64>,
    sections: Vec<SectionHeader>,
}

fn push_section(
    sections: &mut Vec<SectionHeader>,
    payload: &mut Vec<f64>,
    name: &str,
    values: Vec<f64>,
    step: Option<u64>,
) {
    sections.push(SectionHeader {
        name: name.to_string(),
        len: values.len(),
        step,
    });
    payload.extend(values);
}

/// Serializes the agent's networks, optimizer states and noise state.
pub fn save_agent(agent: &Agent, builder: &InputBuilder, path: &Path) -> Result<()> {
    let mut sections = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    match &agent.policy {
        PolicyNets::Manual => {}
        PolicyNets::Deterministic {
            actor,
            actor_target,
            critic,
            critic_target,
            actor_opt,
            critic_opt,
            ..
        } => {
            push_section(&mut sections, &mut payload, "actor", actor.params_flat(), None);
            push_section(
                &mut sections,
                &mut payload,
                "actor_target",
                actor_target.params_flat(),
                None,
            );
            push_section(&mut sections, &mut payload, "critic", critic.params_flat(), None);
            push_section(
                &mut sections,
                &mut payload,
                "critic_target",
                critic_target.params_flat(),
                None,
            );
            let (t, state) = actor_opt.state_flat();
            push_section(&mut sections, &mut payload, "actor_opt", state, Some(t));
            let (t, state) = critic_opt.state.state_flat();
            push_section(&mut sections, &mut payload, "critic_opt_state", state, Some(t));
            let (t, state) = critic_opt.trunk.state_flat();
            push_section(&mut sections, &mut payload, "critic_opt_trunk", state, Some(t));
        }
        PolicyNets::ActorCritic {
            actor,
            value,
            actor_opt,
            value_opt,
            ..
        } => {
            push_section(&mut sections, &mut payload, "actor", actor.params_flat(), None);
            push_section(&mut sections, &mut payload, "value", value.params_flat(), None);
            let (t, state) = actor_opt.state_flat();
            push_section(&mut sections, &mut payload, "actor_opt", state, Some(t));
            let (t, state) = value_opt.state_flat();
            push_section(&mut sections, &mut payload, "value_opt", state, Some(t));
        }
        PolicyNets::Bandit {
            estimator,
            estimator_opt,
        } => {
            push_section(
                &mut sections,
                &mut payload,
                "estimator",
                estimator.params_flat(),
                None,
            );
            let (t, state) = estimator_opt.state.state_flat();
            push_section(&mut sections, &mut payload, "estimator_opt_state", state, Some(t));
            let (t, state) = estimator_opt.trunk.state_flat();
            push_section(&mut sections, &mut payload, "estimator_opt_trunk", state, Some(t));
        }
    }
    let header = CheckpointHeader {
        version: 1,
        index: agent.index,
        seed: agent.seed,
        n: builder.n,
        l: builder.l,
        config: agent.config,
        noise_sigma: agent.noise.sigma,
        noise_state: agent.noise.state.clone(),
        sections,
    };
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(b"\n")?;
    for v in &payload {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Restores an agent saved with [`save_agent`]. The clustering shape must
/// match the builder the checkpoint was created under.
pub fn load_agent(path: &Path, builder: &InputBuilder) -> Result<Agent> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header_line = String::new();
    std::io::BufRead::read_line(&mut r, &mut header_line)?;
    let header: CheckpointHeader =
        serde_json::from_str(header_line.trim_end()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    if header.n != builder.n || header.l != builder.l {
        return Err(Error::Checkpoint(format!(
            "checkpoint clustering {}x{} does not match run {}x{}",
            header.n, header.l, builder.n, builder.l
        )));
    }
    let total: usize = header.sections.iter().map(|s| s.len).sum();
    let mut bytes = Vec::with_capacity(total * 8);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, expected {}",
            bytes.len(),
            total * 8
        )));
    }
    let mut values = Vec::with_capacity(total);
    for chunk in bytes.chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
    }

    let mut agent = Agent::new(header.index, header.config, builder, header.seed)?;
    agent.noise.sigma = header.noise_sigma;
    agent.noise.state = header.noise_state.clone();

    let mut off = 0usize;
    let mut take = |len: usize| -> &[f64] {
        let s = &values[off..off + len];
        off += len;
        s
    };
    for section in &header.sections {
        let data = take(section.len);
        let missing = || Error::Checkpoint(format!("unexpected section {}", section.name));
        match (&mut agent.policy, section.name.as_str()) {
            (PolicyNets::Deterministic { actor, .. }, "actor") => actor.set_params_flat(data)?,
            (PolicyNets::Deterministic { actor_target, .. }, "actor_target") => {
                actor_target.set_params_flat(data)?
            }
            (PolicyNets::Deterministic { critic, .. }, "critic") => critic.set_params_flat(data)?,
            (PolicyNets::Deterministic { critic_target, .. }, "critic_target") => {
                critic_target.set_params_flat(data)?
            }
            (PolicyNets::Deterministic { actor_opt, .. }, "actor_opt") => {
                actor_opt.set_state_flat(section.step.unwrap_or(0), data)?
            }
            (PolicyNets::Deterministic { critic_opt, .. }, "critic_opt_state") => {
                critic_opt.state.set_state_flat(section.step.unwrap_or(0), data)?
            }
            (PolicyNets::Deterministic { critic_opt, .. }, "critic_opt_trunk") => {
                critic_opt.trunk.set_state_flat(section.step.unwrap_or(0), data)?
            }
            (PolicyNets::ActorCritic { actor, .. }, "actor") => actor.set_params_flat(data)?,
            (PolicyNets::ActorCritic { value, .. }, "value") => value.set_params_flat(data)?,
            (PolicyNets::ActorCritic { actor_opt, .. }, "actor_opt") => {
                actor_opt.set_state_flat(section.step.unwrap_or(0), data)?
            }
            (PolicyNets::ActorCritic { value_opt, .. }, "value_opt") => {
                value_opt.set_state_flat(section.step.unwrap_or(0), data)?
            }
            (PolicyNets::Bandit { estimator, .. }, "estimator") => {
                estimator.set_params_flat(data)?
            }
            (PolicyNets::Bandit { estimator_opt, .. }, "estimator_opt_state") => {
                estimator_opt.state.set_state_flat(section.step.unwrap_or(0), data)?
            }
            (PolicyNets::Bandit { estimator_opt, .. }, "estimator_opt_trunk") => {
                estimator_opt.trunk.set_state_flat(section.step.unwrap_or(0), data)?
            }
            _ => return Err(missing()),
        }
    }
    Ok(agent)
}
