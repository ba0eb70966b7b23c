use super::kernels::{self, ConvGeom};
use super::{Grads, ParamId, ParamStore, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Input,
    Conv {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        cout: usize,
        geom: ConvGeom,
    },
    ConvT {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        cout: usize,
        kernel: [usize; 3],
    },
    InstanceNorm {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    Prelu {
        x: NodeId,
        alpha: ParamId,
    },
    Add(NodeId, NodeId),
    Concat(NodeId, NodeId),
    /// `out[i] = x[index[i]]`
    Gather {
        x: NodeId,
        index: Vec<usize>,
    },
}

struct Node {
    value: Volume,
    op: Op,
    /// False for inputs and anything computed only from inputs.
    needs_grad: bool,
}

/// A recorded forward computation over a borrowed parameter set.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Volume, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Volume {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, v: Volume) -> NodeId {
        self.push(v, Op::Input, false)
    }

    /// `w` has shape `[cout, cin, kd, kh, kw]`.
    pub fn conv(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>, geom: ConvGeom) -> NodeId {
        let p = self.params.get(w);
        let cout = p.shape[0];
        debug_assert_eq!(p.shape[1], self.value(x).channels(), "{}", p.name);
        let bias = b.map(|b| self.params.data(b));
        let y = kernels::conv3d_forward(self.value(x), &p.data, bias, cout, &geom);
        self.push(y, Op::Conv { x, w, b, cout, geom }, true)
    }

    /// `w` has shape `[cin, cout, kd, kh, kw]`; stride equals the kernel.
    pub fn conv_transpose(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> NodeId {
        let p = self.params.get(w);
        let cout = p.shape[1];
        let kernel = [p.shape[2], p.shape[3], p.shape[4]];
        let bias = b.map(|b| self.params.data(b));
        let y = kernels::conv_transpose_forward(self.value(x), &p.data, bias, cout, kernel);
        self.push(y, Op::ConvT { x, w, b, cout, kernel }, true)
    }

    pub fn instance_norm(&mut self, x: NodeId) -> NodeId {
        let (y, inv_std) = kernels::instance_norm_forward(self.value(x));
        let g = self.nodes[x.0].needs_grad;
        self.push(y, Op::InstanceNorm { x, inv_std }, g)
    }

    pub fn prelu(&mut self, x: NodeId, alpha: ParamId) -> NodeId {
        let a = self.params.data(alpha)[0];
        let y = kernels::prelu_forward(self.value(x), a);
        self.push(y, Op::Prelu { x, alpha }, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "add shape");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let g = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(Volume { shape: va.shape, data }, Op::Add(a, b), g)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape[1..], vb.shape[1..], "concat shape");
        let mut data = va.data.clone();
        data.extend_from_slice(&vb.data);
        let shape = [va.shape[0] + vb.shape[0], va.shape[1], va.shape[2], va.shape[3]];
        let g = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(Volume { shape, data }, Op::Concat(a, b), g)
    }

    /// Keep only the listed depth indices, in the given order.
    pub fn select_frames(&mut self, x: NodeId, frames: &[usize]) -> NodeId {
        let [c, d, h, w] = self.value(x).shape;
        let hw = h * w;
        let mut index = Vec::with_capacity(c * frames.len() * hw);
        for ch in 0..c {
            for &f in frames {
                assert!(f < d, "select_frames index {f} out of range {d}");
                index.extend((ch * d + f) * hw..(ch * d + f + 1) * hw);
            }
        }
        self.gather(x, [c, frames.len(), h, w], index)
    }

    /// Arbitrary re-indexing: element `i` of the result is `x[index[i]]`.
    pub fn gather(&mut self, x: NodeId, shape: [usize; 4], index: Vec<usize>) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), index.len(), "gather shape");
        let v = self.value(x);
        let data = index.iter().map(|&i| v.data[i]).collect();
        let g = self.nodes[x.0].needs_grad;
        self.push(Volume { shape, data }, Op::Gather { x, index }, g)
    }

    /// Parameter gradients of `<grad, value(out)>`.
    pub fn backward(&self, out: NodeId, grad: Volume) -> Grads {
        assert_eq!(grad.shape, self.value(out).shape, "output gradient shape");
        let mut pg = Grads::zeros_like(self.params);
        let mut ng: Vec<Option<Volume>> = (0..=out.0).map(|_| None).collect();
        ng[out.0] = Some(grad);

        fn acc(slot: &mut Option<Volume>, g: Volume) {
            match slot {
                Some(v) => v.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        fn acc_param(pg: &mut Grads, id: ParamId, g: &[f64]) {
            pg.values[id.0].iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }

        for i in (0..=out.0).rev() {
            let Some(dy) = ng[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let wants = |n: NodeId| self.nodes[n.0].needs_grad;
            match &node.op {
                Op::Input => {}
                Op::Conv { x, w, b, cout, geom } => {
                    let g = kernels::conv3d_backward(self.value(*x), self.params.data(*w), *cout, geom, &dy, wants(*x));
                    acc_param(&mut pg, *w, &g.dweight);
                    if let Some(b) = b {
                        acc_param(&mut pg, *b, &g.dbias);
                    }
                    if let Some(dx) = g.dx {
                        acc(&mut ng[x.0], dx);
                    }
                }
                Op::ConvT { x, w, b, cout, kernel } => {
                    let g = kernels::conv_transpose_backward(self.value(*x), self.params.data(*w), *cout, *kernel, &dy, wants(*x));
                    acc_param(&mut pg, *w, &g.dweight);
                    if let Some(b) = b {
                        acc_param(&mut pg, *b, &g.dbias);
                    }
                    if let Some(dx) = g.dx {
                        acc(&mut ng[x.0], dx);
                    }
                }
                Op::InstanceNorm { x, inv_std } => {
                    if wants(*x) {
                        let dx = kernels::instance_norm_backward(&node.value, inv_std, &dy);
                        acc(&mut ng[x.0], dx);
                    }
                }
                Op::Prelu { x, alpha } => {
                    let a = self.params.data(*alpha)[0];
                    let (dx, da) = kernels::prelu_backward(self.value(*x), a, &dy);
                    acc_param(&mut pg, *alpha, &[da]);
                    if wants(*x) {
                        acc(&mut ng[x.0], dx);
                    }
                }
                Op::Add(a, b) => {
                    if wants(*b) {
                        acc(&mut ng[b.0], dy.clone());
                    }
                    if wants(*a) {
                        acc(&mut ng[a.0], dy);
                    }
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).channels();
                    let s = dy.spatial();
                    let [_, d, h, w] = dy.shape;
                    if wants(*a) {
                        acc(&mut ng[a.0], Volume::from_vec([ca, d, h, w], dy.data[..ca * s].to_vec()).unwrap());
                    }
                    if wants(*b) {
                        let cb = dy.channels() - ca;
                        acc(&mut ng[b.0], Volume::from_vec([cb, d, h, w], dy.data[ca * s..].to_vec()).unwrap());
                    }
                }
                Op::Gather { x, index } => {
                    if wants(*x) {
                        let mut dx = Volume::zeros(self.value(*x).shape);
                        for (&i, g) in index.iter().zip(&dy.data) {
                            dx.data[i] += g;
                        }
                        acc(&mut ng[x.0], dx);
                    }
                }
            }
        }
        pg
    }
}
