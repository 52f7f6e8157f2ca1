//! Lowering of a quantized network graph to an accelerator program.

use std::collections::BTreeMap;

use super::graph::{LayerKind, NetworkGraph, NodeRef};
use super::reference::NetworkOutput;
use super::weights::QuantizedNetwork;
use crate::accel::{
    Accelerator, Destination, Instruction, MachineParams, MemRef, OpKind, Program, Run, Source, TensorDesc,
    WeightBinding, WeightRef, DEFAULT_INPUT_BUFFER_CAPACITY,
};
use crate::error::{CoreError, Result};
use crate::fixq::{dequantize, quantize};
use crate::matrix::RealMatrix;
use crate::tile_mm::{Activation, OutputOrientation};

/// Name of the program output holding the network scores.
pub const SCORES: &str = "scores";

/// One emitted instruction: the layer doing the product and the node it produces.
struct Unit {
    layer: usize,
    produces: usize,
    fused_pool: bool,
}

fn plan_units(graph: &NetworkGraph) -> Result<Vec<Unit>> {
    let mut units = Vec::new();
    let mut fused = vec![false; graph.layers.len()];
    for (i, l) in graph.layers.iter().enumerate() {
        match l.kind {
            LayerKind::SharedMlp => {
                let consumers = graph.consumers(NodeRef::Node(i));
                let pool = match consumers.as_slice() {
                    [(c, 0)] if graph.layers[*c].kind == LayerKind::MaxPool => Some(*c),
                    _ => None,
                };
                if let Some(p) = pool {
                    fused[p] = true;
                }
                units.push(Unit { layer: i, produces: pool.unwrap_or(i), fused_pool: pool.is_some() });
            }
            LayerKind::Fc | LayerKind::TransformApply => units.push(Unit { layer: i, produces: i, fused_pool: false }),
            LayerKind::MaxPool if !fused[i] => {
                return Err(CoreError::Validation(format!(
                    "max-pool `{}` must directly follow a shared MLP that feeds nothing else",
                    l.name
                )))
            }
            LayerKind::MaxPool | LayerKind::Concat => {}
        }
    }
    Ok(units)
}

/// Compile `graph` with the quantized parameters in `net`.
///
/// Shared-MLP layers feeding only a max-pool become fused `MatmulMaxpool`
/// instructions. Transform applications read the T-Net output back from
/// external memory as a frame weight. Concatenation costs no instruction: both
/// producers write straight into one interleaved region, the global feature
/// replicated down every row. A result whose only consumer is the next
/// instruction's data operand stays in the input buffer; everything else goes
/// to external memory.
pub fn compile(graph: &NetworkGraph, net: &QuantizedNetwork) -> Result<Program> {
    graph.validate()?;
    net.check(graph)?;
    let units = plan_units(graph)?;
    let n = graph.n_points;

    let mut next_free = 0usize;
    let mut alloc = |rows: usize, cols: usize| {
        let r = MemRef::dense(next_free, cols);
        next_free += rows * cols;
        r
    };
    let input_region = alloc(n, 3);

    // Write regions for nodes that live in external memory, and the regions consumers read them through.
    let mut write_at: BTreeMap<usize, MemRef> = BTreeMap::new();
    let mut read_at: BTreeMap<NodeRef, MemRef> = BTreeMap::new();
    read_at.insert(NodeRef::Input, input_region);
    for (i, l) in graph.layers.iter().enumerate() {
        if l.kind != LayerKind::Concat {
            continue;
        }
        let base = alloc(n, l.out_dim);
        let pf = graph.dim_of(l.inputs[0]);
        for (slot, &r) in l.inputs.iter().enumerate() {
            let NodeRef::Node(p) = r else {
                return Err(CoreError::Validation(format!("`{}` cannot concatenate the raw input", l.name)));
            };
            let region = if slot == 0 {
                MemRef::strided(base.offset, l.out_dim)
            } else {
                MemRef::strided(base.offset + pf, l.out_dim).replicated(n)
            };
            if write_at.insert(p, region).is_some() {
                return Err(CoreError::Validation(format!("`{}` is concatenated twice", graph.layers[p].name)));
            }
            read_at.insert(r, MemRef { replicate: 1, ..region });
        }
        read_at.insert(NodeRef::Node(i), base);
    }

    let output = graph.output_node();
    let mut to_buffer = vec![false; units.len()];
    for (u, unit) in units.iter().enumerate() {
        let node = NodeRef::Node(unit.produces);
        let rows = graph.rows_of(node);
        let cols = graph.dim_of(node);
        let consumers = graph.consumers(node);
        let next_reads_slot0 =
            units.get(u + 1).is_some_and(|nx| consumers.as_slice() == [(nx.layer, 0)]);
        if next_reads_slot0
            && unit.produces != output
            && !write_at.contains_key(&unit.produces)
            && rows * cols <= DEFAULT_INPUT_BUFFER_CAPACITY
        {
            to_buffer[u] = true;
        } else if let std::collections::btree_map::Entry::Vacant(slot) = write_at.entry(unit.produces) {
            let r = alloc(rows, cols);
            slot.insert(r);
            read_at.insert(node, r);
        }
    }

    let mut instructions = Vec::with_capacity(units.len());
    let mut bindings = Vec::new();
    for (u, unit) in units.iter().enumerate() {
        let l = &graph.layers[unit.layer];
        let src_node = l.inputs[0];
        let input_src = if u > 0 && to_buffer[u - 1] {
            Source::InputBuffer
        } else {
            Source::ExternalMemory(read_at[&src_node])
        };
        let weight = match l.kind {
            LayerKind::TransformApply => {
                let t = l.inputs[1];
                WeightRef::Frame { src: MemRef::dense(read_at[&t].offset, l.in_dim), fmt: net.fmt_of(graph, t) }
            }
            _ => {
                let q = &net.layers[&l.name];
                bindings.push(WeightBinding {
                    id: l.name.clone(),
                    weight: q.weight.clone(),
                    bias: net.bias_codes(graph, &l.name)?,
                });
                WeightRef::Stored(l.name.clone())
            }
        };
        let output_dst = if to_buffer[u] {
            Destination::InputBuffer
        } else {
            Destination::ExternalMemory(write_at[&unit.produces])
        };
        let shift = net.shift_of(graph, l);
        instructions.push(Instruction {
            label: l.name.clone(),
            op_kind: if unit.fused_pool { OpKind::MatmulMaxpool } else { OpKind::Matmul },
            n_rows: graph.rows_of(src_node),
            k_dim: l.in_dim,
            c_dim: l.out_dim,
            input_src,
            input_fmt: net.fmt_of(graph, src_node),
            weight,
            output_dst,
            orientation: if unit.fused_pool {
                OutputOrientation::ColumnOriented
            } else {
                OutputOrientation::RowOriented
            },
            activation: if l.kind == LayerKind::TransformApply { Activation::None } else { l.activation },
            requant_shift: shift,
            out_fmt: net.activations[&graph.layers[unit.produces].name],
        });
    }

    let out_node = NodeRef::Node(output);
    let program = Program {
        instructions,
        bindings,
        input: TensorDesc { name: "points".into(), region: input_region, rows: n, cols: 3, fmt: net.input_fmt },
        outputs: vec![TensorDesc {
            name: SCORES.into(),
            region: read_at[&out_node],
            rows: graph.rows_of(out_node),
            cols: graph.dim_of(out_node),
            fmt: net.fmt_of(graph, out_node),
        }],
        memory_elems: next_free,
    };
    program.validate_structure(DEFAULT_INPUT_BUFFER_CAPACITY)?;
    Ok(program)
}

/// Quantize `points` to the program's input format, install the program's
/// weights on `acc` and run it. Returns the dequantized scores with the run.
pub fn run_compiled(
    acc: &mut Accelerator,
    program: &Program,
    points: &RealMatrix,
    mp: &MachineParams,
) -> Result<(NetworkOutput, Run)> {
    let desc = &program.input;
    if points.cols() != desc.cols || points.rows() != desc.rows {
        let what = format!("program takes {}x{} points, got {}x{}", desc.rows, desc.cols, points.rows(), points.cols());
        return Err(if points.rows() > crate::accel::MAX_POINTS {
            CoreError::Capacity(what)
        } else {
            CoreError::Shape(what)
        });
    }
    let input = quantize(points.data(), &[desc.rows, desc.cols], desc.fmt)?;
    acc.install(program)?;
    let run = acc.run_program(program, &input, mp)?;
    let out = run.output(SCORES).ok_or_else(|| CoreError::Validation("program has no scores output".into()))?;
    let scores = RealMatrix::from_vec(out.dims()[0], out.dims()[1], dequantize(out))?;
    Ok((NetworkOutput { scores }, run))
}
