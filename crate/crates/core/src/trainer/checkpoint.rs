//! Checkpoint directories.
//!
//! ```text
//! <dir>/index.txt     step, optimiser counters and the tensor table
//! <dir>/config.txt    the training configuration
//! <dir>/*.vt          one f64 tensor file per parameter and Adam moment
//! ```
//!
//! Tensors are stored as f64 so a restored run is bit-identical to an
//! uninterrupted one. No RNG position is stored: every step draws from a
//! stream derived from `(seed, step)`.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::TrainConfig;
use super::optim::Adam;
use super::TrainState;
use crate::error::{Error, Result};
use crate::grid::Tensor;
use crate::io::{read_tensor, write_tensor, Dtype};
use crate::nets::ParamSet;

const FORMAT: &str = "vaot-checkpoint 1";
const INDEX: &str = "index.txt";
const CONFIG: &str = "config.txt";

/// `(group, name)` -> file name. Groups: `gen`, `critic`, and `<net>.m` /
/// `<net>.v` for the Adam moments.
fn file_name(group: &str, name: &str) -> String {
    format!("{group}.{name}.vt")
}

fn shape_text(s: &[usize]) -> String {
    if s.is_empty() {
        "scalar".into()
    } else {
        s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

pub fn save_checkpoint(dir: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = format!("{FORMAT}\nstep\t{}\n", state.step);
    let nets = [
        ("gen", &state.gen, &state.opt_gen),
        ("critic", &state.critic, &state.opt_critic),
    ];
    for (net, params, opt) in nets {
        index.push_str(&format!(
            "adam\t{net}\t{}\t{}\t{}\t{}\n",
            opt.t, opt.beta1, opt.beta2, opt.eps
        ));
        let groups = [
            (net.to_string(), params.tensors()),
            (format!("{net}.m"), opt.m.as_slice()),
            (format!("{net}.v"), opt.v.as_slice()),
        ];
        for (group, tensors) in groups {
            for (name, t) in params.names().iter().zip(tensors) {
                let file = file_name(&group, name);
                write_tensor(&dir.join(&file), t, Dtype::F64)?;
                index.push_str(&format!("tensor\t{group}\t{name}\t{}\t{file}\n", shape_text(t.shape())));
            }
        }
    }
    let ip = dir.join(INDEX);
    std::fs::write(&ip, index).map_err(|e| Error::io(&ip, e))?;
    let cp = dir.join(CONFIG);
    std::fs::write(&cp, cfg.to_text()).map_err(|e| Error::io(&cp, e))
}

struct Index {
    step: u64,
    adam: BTreeMap<String, (u64, f64, f64, f64)>,
    files: BTreeMap<(String, String), String>,
}

fn parse_index(text: &str, path: &Path) -> Result<Index> {
    let bad = |reason: String| Error::format(path, reason);
    let mut lines = text.lines();
    if lines.next() != Some(FORMAT) {
        return Err(bad(format!("missing `{FORMAT}` header")));
    }
    let mut step = None;
    let mut adam = BTreeMap::new();
    let mut files = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| bad(format!("line {}: bad number `{s}`", n + 2)))
        };
        match f.as_slice() {
            ["step", s] => {
                step = Some(s.parse().map_err(|_| bad(format!("bad step `{s}`")))?);
            }
            ["adam", net, t, b1, b2, eps] => {
                let t = t.parse().map_err(|_| bad(format!("bad Adam counter `{t}`")))?;
                adam.insert(net.to_string(), (t, num(b1)?, num(b2)?, num(eps)?));
            }
            ["tensor", group, name, _shape, file] => {
                files.insert((group.to_string(), name.to_string()), file.to_string());
            }
            [""] => {}
            _ => return Err(bad(format!("line {}: unrecognised entry", n + 2))),
        }
    }
    let step = step.ok_or_else(|| bad("no step entry".into()))?;
    Ok(Index { step, adam, files })
}

fn load_group(dir: &Path, index: &Index, group: &str, template: &ParamSet) -> Result<Vec<Tensor>> {
    let ip = dir.join(INDEX);
    let mut out = Vec::with_capacity(template.len());
    for (name, want) in template.names().iter().zip(template.tensors()) {
        let file = index
            .files
            .get(&(group.to_string(), name.clone()))
            .ok_or_else(|| Error::format(&ip, format!("tensor `{group}.{name}` is missing")))?;
        let t = read_tensor(&dir.join(file))?;
        if t.shape() != want.shape() {
            return Err(Error::TensorShape {
                name: format!("{group}.{name}"),
                expected: want.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        out.push(t);
    }
    Ok(out)
}

fn load_net(dir: &Path, index: &Index, net: &str, template: &ParamSet) -> Result<(ParamSet, Adam)> {
    let mut params = template.clone();
    for (dst, t) in params.tensors_mut().iter_mut().zip(load_group(dir, index, net, template)?) {
        *dst = t;
    }
    let (t, beta1, beta2, eps) = *index
        .adam
        .get(net)
        .ok_or_else(|| Error::format(dir.join(INDEX), format!("no optimiser entry for `{net}`")))?;
    let adam = Adam {
        beta1,
        beta2,
        eps,
        t,
        m: load_group(dir, index, &format!("{net}.m"), template)?,
        v: load_group(dir, index, &format!("{net}.v"), template)?,
    };
    Ok((params, adam))
}

fn read_index(dir: &Path) -> Result<Index> {
    let ip = dir.join(INDEX);
    let text = std::fs::read_to_string(&ip).map_err(|e| Error::io(&ip, e))?;
    parse_index(&text, &ip)
}

/// Restores configuration and state. The templates fix the expected tensor
/// names and shapes; any mismatch is reported with the tensor's name.
pub fn load_checkpoint(
    dir: &Path,
    gen_template: &ParamSet,
    critic_template: &ParamSet,
) -> Result<(TrainConfig, TrainState)> {
    let index = read_index(dir)?;
    let cp = dir.join(CONFIG);
    let cfg_text = std::fs::read_to_string(&cp).map_err(|e| Error::io(&cp, e))?;
    let cfg = TrainConfig::parse(&cfg_text)?;
    let (gen, opt_gen) = load_net(dir, &index, "gen", gen_template)?;
    let (critic, opt_critic) = load_net(dir, &index, "critic", critic_template)?;
    let state = TrainState {
        step: index.step,
        gen,
        critic,
        opt_gen,
        opt_critic,
    };
    Ok((cfg, state))
}

/// Generator weights only, for inference.
pub fn load_generator(dir: &Path, template: &ParamSet) -> Result<ParamSet> {
    let index = read_index(dir)?;
    let mut params = template.clone();
    for (dst, t) in params.tensors_mut().iter_mut().zip(load_group(dir, &index, "gen", template)?) {
        *dst = t;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{ConvCritic, Critic, Generator, ResidualGenerator};

    fn state() -> TrainState {
        let gen = ResidualGenerator::default().init_params(1);
        let mut critic = ConvCritic::default().init_params(2);
        critic.tensors_mut()[0].data_mut()[0] = 1.0 / 3.0;
        let mut opt_gen = Adam::new(&gen, 0.5, 0.9);
        opt_gen.t = 7;
        opt_gen.m[1].data_mut()[0] = 0.1 + 0.2;
        TrainState {
            step: 5,
            opt_critic: Adam::new(&critic, 0.5, 0.9),
            gen,
            critic,
            opt_gen,
        }
    }

    fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        std::fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = TrainConfig { seed: 9, lr0: 3e-4, ..Default::default() };
        let s = state();
        save_checkpoint(a.path(), &cfg, &s).unwrap();
        let (cfg2, s2) = load_checkpoint(a.path(), &s.gen, &s.critic).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(s2, s);
        save_checkpoint(b.path(), &cfg2, &s2).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
        assert_eq!(load_generator(a.path(), &s.gen).unwrap(), s.gen);
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let d = tempfile::tempdir().unwrap();
        let s = state();
        save_checkpoint(d.path(), &TrainConfig::default(), &s).unwrap();
        let mut wrong = s.gen.clone();
        wrong.tensors_mut()[0] = Tensor::zeros(&[2, 2]);
        let name = wrong.names()[0].clone();
        match load_checkpoint(d.path(), &wrong, &s.critic) {
            Err(Error::TensorShape { name: n, .. }) => assert_eq!(n, format!("gen.{name}")),
            other => panic!("expected a shape error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_tensor_and_bad_index_are_rejected() {
        let d = tempfile::tempdir().unwrap();
        let s = state();
        save_checkpoint(d.path(), &TrainConfig::default(), &s).unwrap();
        let f = d.path().join(file_name("critic", &s.critic.names()[0]));
        let bytes = std::fs::read(&f).unwrap();
        std::fs::write(&f, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(d.path(), &s.gen, &s.critic), Err(Error::Format { .. })));
        std::fs::write(d.path().join(INDEX), "not a checkpoint\n").unwrap();
        assert!(matches!(load_generator(d.path(), &s.gen), Err(Error::Format { .. })));
        assert!(matches!(
            load_generator(&d.path().join("absent"), &s.gen),
            Err(Error::Io { .. })
        ));
    }
}
