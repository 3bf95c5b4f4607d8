//! One finite-difference case per differentiable graph operation.

use mucp::graph::{Graph, Var};
use mucp::model::contrastive_loss;
use mucp::moe::{moe_forward, ExpertVars, MoeVars, RouteConfig};
use mucp::spec::Modality;
use mucp::{Result, Tensor};

use super::{check_gradients, rng, routing_signature, uniform, Build, FdReport};

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Box<Build<'static>>,
}

impl OpCase {
    pub fn run(&self, seed: u64) -> FdReport {
        check_gradients(&self.inputs, seed, 1e-2, &*self.build)
    }
}

fn plain(f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Box<Build<'static>> {
    Box::new(move |g, v| Ok((f(g, v)?, Vec::new())))
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase { name, inputs, build: plain(f) }
}

fn moe_case(name: &'static str, seed: u64, normalize_after: bool) -> OpCase {
    let (s, d, hdim, e) = (6, 4, 8, 4);
    let mut r = rng(seed ^ 0xe0e);
    let mut inputs = vec![uniform(&mut r, &[s, d], -1.0, 1.0), uniform(&mut r, &[d, e], -2.0, 2.0)];
    for _ in 0..e {
        inputs.push(uniform(&mut r, &[d, hdim], -0.7, 0.7));
        inputs.push(uniform(&mut r, &[hdim], -0.2, 0.2));
        inputs.push(uniform(&mut r, &[hdim, d], -0.7, 0.7));
        inputs.push(uniform(&mut r, &[d], -0.2, 0.2));
    }
    let build = move |g: &mut Graph, v: &[Var]| {
        let experts = v[2..]
            .chunks(4)
            .map(|c| ExpertVars { in_proj: c[0], in_bias: c[1], out_proj: c[2], out_bias: c[3] })
            .collect();
        let vars = MoeVars { router: v[1], experts };
        let cfg = RouteConfig {
            top_k: 2,
            capacity_factor: 1.0,
            normalize_after,
            layer_id: 1,
            modality: Modality::Image,
            jitter: None,
        };
        let (y, routing) = moe_forward(g, v[0], &vars, &cfg)?;
        Ok((y, routing_signature(&[routing])))
    };
    OpCase { name, inputs, build: Box::new(build) }
}

/// All cases, with inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let mut u = |shape: &[usize], lo: f32, hi: f32| uniform(&mut r, shape, lo, hi);
    let clamp_input = u(&[4, 5], -2.0, 2.0);
    vec![
        case("matmul", vec![u(&[3, 4], -1.0, 1.0), u(&[4, 5], -1.0, 1.0)], |g, v| g.matmul(v[0], v[1])),
        case("bmm", vec![u(&[2, 3, 4], -1.0, 1.0), u(&[2, 4, 5], -1.0, 1.0)], |g, v| g.bmm(v[0], v[1])),
        case("bmm_t", vec![u(&[2, 3, 4], -1.0, 1.0), u(&[2, 5, 4], -1.0, 1.0)], |g, v| g.bmm_t(v[0], v[1])),
        case("add", vec![u(&[3, 4], -1.0, 1.0), u(&[3, 4], -1.0, 1.0)], |g, v| g.add(v[0], v[1])),
        case("add_broadcast", vec![u(&[2, 3, 4], -1.0, 1.0), u(&[4], -1.0, 1.0)], |g, v| g.add_broadcast(v[0], v[1])),
        case("sub", vec![u(&[3, 4], -1.0, 1.0), u(&[3, 4], -1.0, 1.0)], |g, v| g.sub(v[0], v[1])),
        case("mul", vec![u(&[3, 4], -1.0, 1.0), u(&[3, 4], -1.0, 1.0)], |g, v| g.mul(v[0], v[1])),
        case("div", vec![u(&[3, 4], -1.0, 1.0), u(&[3, 4], 0.5, 2.0)], |g, v| g.div(v[0], v[1])),
        case("scale", vec![u(&[3, 4], -1.0, 1.0)], |g, v| Ok(g.scale(v[0], 1.7))),
        case("scale_by", vec![u(&[3, 4], -1.0, 1.0), u(&[1], -1.0, 1.0)], |g, v| g.scale_by(v[0], v[1])),
        case("scale_rows", vec![u(&[3, 4], -1.0, 1.0), u(&[3], -1.0, 1.0)], |g, v| g.scale_rows(v[0], v[1])),
        case("gelu", vec![u(&[3, 5], -3.0, 3.0)], |g, v| Ok(g.gelu(v[0]))),
        case("exp", vec![u(&[3, 4], -2.0, 2.0)], |g, v| Ok(g.exp(v[0]))),
        case("log", vec![u(&[3, 4], 0.5, 3.0)], |g, v| Ok(g.log(v[0]))),
        OpCase {
            name: "clamp_max",
            inputs: vec![clamp_input],
            build: Box::new(|g, v| {
                let active = g.value(v[0]).data().iter().map(|&x| usize::from(x > 0.3)).collect();
                Ok((g.clamp_max(v[0], 0.3), active))
            }),
        },
        case("reshape", vec![u(&[2, 3, 4], -1.0, 1.0)], |g, v| {
            let r = g.reshape(v[0], &[6, 4])?;
            let w = g.constant(Tensor::from_fn(&[6, 4], |i| i as f32 * 0.1));
            g.mul(r, w)
        }),
        case("permute", vec![u(&[2, 3, 4], -1.0, 1.0)], |g, v| g.permute(v[0], &[2, 0, 1])),
        case("transpose", vec![u(&[3, 5], -1.0, 1.0)], |g, v| g.transpose(v[0])),
        case("gather_rows", vec![u(&[3, 4], -1.0, 1.0)], |g, v| g.gather_rows(v[0], &[2, 0, 2, 1])),
        case("scatter_add_rows", vec![u(&[4, 3], -1.0, 1.0)], |g, v| g.scatter_add_rows(v[0], &[1, 0, 1, 3], 5)),
        case("gather_elems", vec![u(&[3, 4], -1.0, 1.0)], |g, v| g.gather_elems(v[0], &[0, 5, 5, 11])),
        case("sum", vec![u(&[3, 4], -1.0, 1.0)], |g, v| Ok(g.sum(v[0]))),
        case("mean", vec![u(&[3, 4], -1.0, 1.0)], |g, v| Ok(g.mean(v[0]))),
        case("sum_axis", vec![u(&[2, 3, 4], -1.0, 1.0)], |g, v| g.sum_axis(v[0], 1)),
        case("mean_axis", vec![u(&[2, 3, 4], -1.0, 1.0)], |g, v| g.mean_axis(v[0], 0)),
        case("logsumexp", vec![u(&[3, 5], -2.0, 2.0)], |g, v| g.logsumexp(v[0], 1)),
        case("logsumexp_axis0", vec![u(&[3, 5], -2.0, 2.0)], |g, v| g.logsumexp(v[0], 0)),
        case("softmax", vec![u(&[3, 5], -2.0, 2.0)], |g, v| g.softmax(v[0], 1)),
        case("softmax_axis0", vec![u(&[2, 3, 4], -2.0, 2.0)], |g, v| g.softmax(v[0], 0)),
        case("log_softmax", vec![u(&[3, 5], -2.0, 2.0)], |g, v| g.log_softmax(v[0], 1)),
        case("layer_norm", vec![u(&[3, 6], -1.0, 1.0), u(&[6], 0.5, 1.5), u(&[6], -0.5, 0.5)], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        case("l2_normalize", vec![u(&[3, 5], -1.0, 1.0)], |g, v| Ok(g.l2_normalize(v[0]))),
        case("contrastive_loss", vec![u(&[4, 6], -1.0, 1.0), u(&[4, 6], -1.0, 1.0), u(&[1], 0.5, 1.5)], |g, v| {
            let a = g.l2_normalize(v[0]);
            let b = g.l2_normalize(v[1]);
            contrastive_loss(g, a, b, v[2])
        }),
        moe_case("moe_forward", seed, false),
        moe_case("moe_forward_normalized", seed, true),
    ]
}
