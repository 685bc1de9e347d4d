//! Single-file checkpoint container: a plain-text, versioned descriptor
//! header followed by concatenated little-endian f64 segments.
//!
//! Layout:
//! ```text
//! elue-checkpoint v1
//! meta <key> <value>
//! segment <name> <aux> <dims> <offset> <len>
//! end-header
//! <binary payload>
//! ```
//! `dims` is comma-separated (`-` for scalars), `aux` carries the Adam step
//! count for parameter values, the observation count for beliefs, and the
//! insertion count for replay buffers. Offsets are float indices into the
//! payload. Save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::agent::{AgentConfig, AgentNets};
use crate::embed::{BeliefState, EmbedConfig, EmbedNets};
use crate::envsim::Transition;
use crate::ndiff::{ParamEntry, ParameterSet, Tensor};
use crate::replay::TaskBuffer;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &str = "elue-checkpoint";

/// One named float array in the container.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub aux: u64,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

/// Generic header + segments container.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub segments: Vec<Segment>,
}

impl Container {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = format!("{MAGIC} v{SCHEMA_VERSION}\n");
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for seg in &self.segments {
            let dims = if seg.dims.is_empty() {
                "-".to_string()
            } else {
                seg.dims
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            header.push_str(&format!(
                "segment {} {} {} {} {}\n",
                seg.name,
                seg.aux,
                dims,
                offset,
                seg.values.len()
            ));
            offset += seg.values.len();
        }
        header.push_str("end-header\n");

        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(header.as_bytes())?;
        for seg in &self.segments {
            for v in &seg.values {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let header_end = find_header_end(&bytes)?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| Error::Checkpoint("header is not utf-8".into()))?;
        let payload = &bytes[header_end..];

        let mut lines = header.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("empty header".into()))?;
        let version = first
            .strip_prefix(&format!("{MAGIC} v"))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::Checkpoint(format!("bad magic line `{first}`")))?;
        if version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "schema version {version} is not supported (expected {SCHEMA_VERSION})"
            )));
        }

        let mut container = Container::default();
        for line in lines {
            if line == "end-header" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::Checkpoint(format!("bad meta line `{line}`")))?;
                container.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("segment ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 5 {
                    return Err(Error::Checkpoint(format!("bad segment line `{line}`")));
                }
                let name = parts[0].to_string();
                let aux: u64 = parts[1]
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad aux in `{line}`")))?;
                let dims: Vec<usize> = if parts[2] == "-" {
                    Vec::new()
                } else {
                    parts[2]
                        .split(',')
                        .map(|d| {
                            d.parse()
                                .map_err(|_| Error::Checkpoint(format!("bad dims in `{line}`")))
                        })
                        .collect::<Result<_>>()?
                };
                let offset: usize = parts[3]
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad offset in `{line}`")))?;
                let len: usize = parts[4]
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad length in `{line}`")))?;
                let start = offset * 8;
                let end = start + len * 8;
                if end > payload.len() {
                    return Err(Error::Checkpoint(format!(
                        "segment `{name}` extends past the payload"
                    )));
                }
                let values = payload[start..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                container.segments.push(Segment {
                    name,
                    aux,
                    dims,
                    values,
                });
            } else {
                return Err(Error::Checkpoint(format!("unknown header line `{line}`")));
            }
        }
        Ok(container)
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key `{key}`")))?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad meta value for `{key}`")))
    }
}

fn find_header_end(bytes: &[u8]) -> Result<usize> {
    let needle = b"end-header\n";
    let mut i = 0;
    while i + needle.len() <= bytes.len() {
        if &bytes[i..i + needle.len()] == needle {
            return Ok(i + needle.len());
        }
        // headers are line-structured; skip to the next newline
        match bytes[i..].iter().position(|&b| b == b'\n') {
            Some(p) => i += p + 1,
            None => break,
        }
    }
    Err(Error::Checkpoint("missing end-header marker".into()))
}

fn push_param_set(segments: &mut Vec<Segment>, prefix: &str, params: &ParameterSet) {
    for (name, entry) in params.iter() {
        segments.push(Segment {
            name: format!("{prefix}/{name}"),
            aux: entry.step,
            dims: entry.value.shape().to_vec(),
            values: entry.value.values().to_vec(),
        });
        segments.push(Segment {
            name: format!("{prefix}/{name}#m"),
            aux: 0,
            dims: entry.m.shape().to_vec(),
            values: entry.m.values().to_vec(),
        });
        segments.push(Segment {
            name: format!("{prefix}/{name}#v"),
            aux: 0,
            dims: entry.v.shape().to_vec(),
            values: entry.v.values().to_vec(),
        });
    }
}

fn read_param_set(container: &Container, prefix: &str) -> Result<ParameterSet> {
    let mut set = ParameterSet::new();
    let want = format!("{prefix}/");
    for seg in &container.segments {
        if let Some(name) = seg.name.strip_prefix(&want) {
            if name.contains('#') {
                continue;
            }
            let m = container
                .segment(&format!("{prefix}/{name}#m"))
                .ok_or_else(|| Error::Checkpoint(format!("missing moment for `{name}`")))?;
            let v = container
                .segment(&format!("{prefix}/{name}#v"))
                .ok_or_else(|| Error::Checkpoint(format!("missing moment for `{name}`")))?;
            set.insert_entry(
                name,
                ParamEntry {
                    value: Tensor::new(seg.dims.clone(), seg.values.clone())
                        .map_err(|e| Error::Checkpoint(format!("segment `{}`: {e}", seg.name)))?,
                    m: Tensor::new(m.dims.clone(), m.values.clone())
                        .map_err(|e| Error::Checkpoint(format!("segment `{}`: {e}", m.name)))?,
                    v: Tensor::new(v.dims.clone(), v.values.clone())
                        .map_err(|e| Error::Checkpoint(format!("segment `{}`: {e}", v.name)))?,
                    step: seg.aux,
                },
            );
        }
    }
    if set.is_empty() {
        return Err(Error::Checkpoint(format!("no `{prefix}/` segments found")));
    }
    Ok(set)
}

/// Serialize a belief as (count, aggregate, mean, log_std).
pub fn belief_segment(name: &str, belief: &BeliefState) -> Segment {
    Segment {
        name: name.to_string(),
        aux: belief.count as u64,
        dims: vec![belief.to_flat().len()],
        values: belief.to_flat(),
    }
}

pub fn belief_from_segment(seg: &Segment, agg_dim: usize, z_dim: usize) -> Result<BeliefState> {
    BeliefState::from_flat(seg.aux as usize, agg_dim, z_dim, &seg.values)
}

/// A full training state: embedding nets, agent nets, optimizer state and
/// optionally the replay buffers, plus a config echo.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub embed: EmbedNets,
    pub agent: AgentNets,
    pub buffers: Option<Vec<TaskBuffer>>,
    pub no_embedding: bool,
    pub config_echo: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut meta = BTreeMap::new();
        let e = &self.embed.cfg;
        let a = &self.agent.cfg;
        meta.insert("state_dim".into(), e.state_dim.to_string());
        meta.insert("action_dim".into(), e.action_dim.to_string());
        meta.insert("z_dim".into(), e.z_dim.to_string());
        meta.insert("agg_dim".into(), e.agg_dim.to_string());
        meta.insert("embed_hidden".into(), e.hidden.to_string());
        meta.insert("w_dim".into(), a.w_dim.to_string());
        meta.insert("agent_hidden".into(), a.hidden.to_string());
        meta.insert("no_embedding".into(), self.no_embedding.to_string());
        for (k, v) in &self.config_echo {
            meta.insert(format!("config.{k}"), v.clone());
        }

        let mut segments = Vec::new();
        push_param_set(&mut segments, "phi", &self.embed.params);
        push_param_set(&mut segments, "pi", &self.agent.pi_params);
        push_param_set(&mut segments, "q", &self.agent.q_params);
        push_param_set(&mut segments, "v", &self.agent.v_params);
        push_param_set(&mut segments, "v_target", &self.agent.v_target);
        if let Some(buffers) = &self.buffers {
            for buf in buffers {
                let mut values = Vec::with_capacity(buf.len() * Transition::FEATURES);
                for t in buf.iter() {
                    values.extend_from_slice(&t.features());
                }
                segments.push(Segment {
                    name: format!("buffer/{}", buf.task_id),
                    aux: buf.insertion_count(),
                    dims: vec![buf.len(), Transition::FEATURES],
                    values,
                });
                meta.insert(
                    format!("buffer_capacity.{}", buf.task_id),
                    buf.capacity().to_string(),
                );
            }
        }
        Container { meta, segments }
    }

    pub fn from_container(container: &Container) -> Result<Self> {
        let embed_cfg = EmbedConfig {
            state_dim: container.meta_parsed("state_dim")?,
            action_dim: container.meta_parsed("action_dim")?,
            z_dim: container.meta_parsed("z_dim")?,
            agg_dim: container.meta_parsed("agg_dim")?,
            hidden: container.meta_parsed("embed_hidden")?,
        };
        let agent_cfg = AgentConfig {
            state_dim: embed_cfg.state_dim,
            action_dim: embed_cfg.action_dim,
            z_dim: embed_cfg.z_dim,
            w_dim: container.meta_parsed("w_dim")?,
            hidden: container.meta_parsed("agent_hidden")?,
        };
        let embed = EmbedNets::from_params(embed_cfg, read_param_set(container, "phi")?);
        let agent = AgentNets::from_params(
            agent_cfg,
            read_param_set(container, "pi")?,
            read_param_set(container, "q")?,
            read_param_set(container, "v")?,
            read_param_set(container, "v_target")?,
        );

        let mut buffers = Vec::new();
        for seg in &container.segments {
            if let Some(id) = seg.name.strip_prefix("buffer/") {
                let task_id: u64 = id
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad buffer id `{id}`")))?;
                let capacity: usize =
                    container.meta_parsed(&format!("buffer_capacity.{task_id}"))?;
                let mut buf = TaskBuffer::restore_empty(task_id, capacity, seg.aux);
                for chunk in seg.values.chunks_exact(Transition::FEATURES) {
                    buf.push_restored(Transition {
                        state: [chunk[0], chunk[1]],
                        action: [chunk[2], chunk[3]],
                        reward: chunk[4],
                        next_state: [chunk[5], chunk[6]],
                    });
                }
                buffers.push(buf);
            }
        }

        let mut config_echo = BTreeMap::new();
        for (k, v) in &container.meta {
            if let Some(key) = k.strip_prefix("config.") {
                config_echo.insert(key.to_string(), v.clone());
            }
        }

        Ok(Checkpoint {
            embed,
            agent,
            buffers: if buffers.is_empty() { None } else { Some(buffers) },
            no_embedding: container.meta_parsed("no_embedding")?,
            config_echo,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
