use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm2d, Conv2d, GlobalAvgPool, Linear, Mode, Param, Relu};
use crate::nn::spec::{BlockShape, NetworkSpec};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, Gemm, Tensor};

/// Residual block: `conv3x3 -> bn -> relu -> mask -> conv3x3 -> bn`, plus the
/// skip path (identity or 1x1 projection), followed by a ReLU.
///
/// The first convolution is the prunable layer. Pruned channels are masked:
/// their activation is forced to zero and their parameters held at zero.
#[derive(Debug, Clone)]
pub struct Block<T> {
    pub shape: BlockShape,
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub projection: Option<Conv2d<T>>,
    /// Liveness of each output channel of `conv1`.
    pub alive: Vec<bool>,
    relu1: Relu,
    relu_out: Relu,
    /// Masked post-ReLU activation of the prunable layer, `[N, width, H, W]`.
    activation: Option<Tensor<T>>,
    /// Gradient of the loss with respect to `activation`.
    activation_grad: Option<Tensor<T>>,
}

impl<T: Scalar> Block<T> {
    fn new(shape: BlockShape, rng: &mut Rng) -> Self {
        let conv1 = Conv2d::new(shape.in_channels, shape.width, ConvGeometry::same3x3(shape.stride), rng);
        let conv2 = Conv2d::new(shape.width, shape.out_channels, ConvGeometry::same3x3(1), rng);
        let projection = shape.has_projection().then(|| {
            Conv2d::new(
                shape.in_channels,
                shape.out_channels,
                ConvGeometry::projection(shape.stride),
                rng,
            )
        });
        Self {
            shape,
            conv1,
            bn1: BatchNorm2d::new(shape.width),
            conv2,
            bn2: BatchNorm2d::new(shape.out_channels),
            projection,
            alive: vec![true; shape.width],
            relu1: Relu::default(),
            relu_out: Relu::default(),
            activation: None,
            activation_grad: None,
        }
    }

    pub fn live_width(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    fn apply_mask(&self, x: &mut Tensor<T>) {
        if self.alive.iter().all(|&a| a) {
            return;
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let p = x.shape()[2] * x.shape()[3];
        for b in 0..n {
            for ch in 0..c {
                if !self.alive[ch] {
                    x.data_mut()[(b * c + ch) * p..][..p].iter_mut().for_each(|v| *v = T::zero());
                }
            }
        }
    }

    /// Holds masked channels' first-conv filters and norm parameters at zero.
    pub fn zero_dead_params(&mut self) {
        let per = self.conv1.weight.value.len() / self.shape.width;
        for (ch, _) in self.alive.iter().enumerate().filter(|(_, a)| !**a) {
            self.conv1.weight.value.data_mut()[ch * per..(ch + 1) * per]
                .iter_mut()
                .for_each(|v| *v = T::zero());
            self.bn1.gamma.value[ch] = T::zero();
            self.bn1.beta.value[ch] = T::zero();
        }
    }

    fn infer(&self, x: &Tensor<T>, gemm: Gemm) -> Result<Tensor<T>> {
        let h = self.conv1.infer(x, gemm)?;
        let h = self.bn1.infer(&h)?;
        let mut h = Relu::infer(&h);
        self.apply_mask(&mut h);
        let h = self.conv2.infer(&h, gemm)?;
        let mut h = self.bn2.infer(&h)?;
        match &self.projection {
            Some(p) => h.add_assign(&p.infer(x, gemm)?)?,
            None => h.add_assign(x)?,
        }
        Ok(Relu::infer(&h))
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode, gemm: Gemm) -> Result<Tensor<T>> {
        let h = self.conv1.forward(x, gemm)?;
        let h = self.bn1.forward(&h, mode)?;
        let mut h = self.relu1.forward(&h);
        self.apply_mask(&mut h);
        let out = self.conv2.forward(&h, gemm)?;
        self.activation = Some(h);
        self.activation_grad = None;
        let mut out = self.bn2.forward(&out, mode)?;
        match &mut self.projection {
            Some(p) => out.add_assign(&p.forward(x, gemm)?)?,
            None => out.add_assign(x)?,
        }
        Ok(self.relu_out.forward(&out))
    }

    fn backward(&mut self, dy: &Tensor<T>, gemm: Gemm) -> Result<Tensor<T>> {
        let d_sum = self.relu_out.backward(dy)?;
        let d_skip = match &mut self.projection {
            Some(p) => p.backward(&d_sum, gemm, true)?.unwrap(),
            None => d_sum.clone(),
        };
        let d = self.bn2.backward(&d_sum)?;
        let mut d_act = self.conv2.backward(&d, gemm, true)?.unwrap();
        self.apply_mask(&mut d_act);
        self.activation_grad = Some(d_act.clone());
        let d = self.relu1.backward(&d_act)?;
        let d = self.bn1.backward(&d)?;
        let mut dx = self.conv1.backward(&d, gemm, true)?.unwrap();
        dx.add_assign(&d_skip)?;
        Ok(dx)
    }
}

/// Output of a forward pass: class scores plus one activation per attention
/// point (group output).
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub attention: Vec<Tensor<T>>,
}

/// WideResNet-style network: stem conv, residual groups, pooling, classifier.
#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetworkSpec,
    pub stem: Conv2d<T>,
    pub stem_bn: BatchNorm2d<T>,
    pub blocks: Vec<Block<T>>,
    pub classifier: Linear<T>,
    stem_relu: Relu,
    pool: GlobalAvgPool,
    /// GEMM thread count; 1 keeps every result bit-reproducible.
    pub gemm: Gemm,
    /// Scan every layer output for NaN/Inf.
    pub checked: bool,
}

impl<T: Scalar> Network<T> {
    pub fn new(spec: &NetworkSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let stem = Conv2d::new(spec.input[0], spec.stem_width, ConvGeometry::same3x3(1), rng);
        let blocks = spec.block_shapes().into_iter().map(|s| Block::new(s, rng)).collect();
        let last = spec.groups.last().unwrap().width;
        let classifier = Linear::new(last, spec.classes, rng);
        Ok(Self {
            spec: spec.clone(),
            stem,
            stem_bn: BatchNorm2d::new(spec.stem_width),
            blocks,
            classifier,
            stem_relu: Relu::default(),
            pool: GlobalAvgPool::default(),
            gemm: Gemm::single_thread(),
            checked: false,
        })
    }

    /// Architecture at construction; masked channels are not reflected.
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Architecture after physically removing masked channels.
    pub fn live_spec(&self) -> NetworkSpec {
        self.spec
            .with_widths(&self.live_widths())
            .expect("live widths are at least one")
    }

    pub fn live_widths(&self) -> Vec<usize> {
        self.blocks.iter().map(Block::live_width).collect()
    }

    pub fn live_param_count(&self) -> usize {
        self.live_spec().param_count()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if [c, h, w] != self.spec.input {
            return Err(Error::shape(format!(
                "batch {:?} does not match network input {:?}",
                x.shape(),
                self.spec.input
            )));
        }
        Ok(())
    }

    fn scan(&self, t: &Tensor<T>, what: &str) -> Result<()> {
        if self.checked {
            t.ensure_finite(what)?;
        }
        Ok(())
    }

    fn group_ends(&self) -> Vec<usize> {
        let mut ends = Vec::new();
        let mut idx = 0;
        for g in &self.spec.groups {
            idx += g.blocks.len();
            ends.push(idx - 1);
        }
        ends
    }

    /// Read-only inference (batch norm uses running statistics).
    pub fn infer(&self, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.check_input(x)?;
        let h = self.stem.infer(x, self.gemm)?;
        let mut h = Relu::infer(&self.stem_bn.infer(&h)?);
        let ends = self.group_ends();
        let mut attention = Vec::with_capacity(ends.len());
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.infer(&h, self.gemm)?;
            self.scan(&h, "block output")?;
            if ends.contains(&i) {
                attention.push(h.clone());
            }
        }
        let logits = self.classifier.infer(&GlobalAvgPool::infer(&h)?, self.gemm)?;
        self.scan(&logits, "logits")?;
        Ok(ForwardOutput { logits, attention })
    }

    /// Forward pass caching everything `backward` needs.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<ForwardOutput<T>> {
        self.check_input(x)?;
        let gemm = self.gemm;
        let h = self.stem.forward(x, gemm)?;
        let h = self.stem_bn.forward(&h, mode)?;
        let mut h = self.stem_relu.forward(&h);
        let ends = self.group_ends();
        let mut attention = Vec::with_capacity(ends.len());
        for i in 0..self.blocks.len() {
            h = self.blocks[i].forward(&h, mode, gemm)?;
            self.scan(&h, "block output")?;
            if ends.contains(&i) {
                attention.push(h.clone());
            }
        }
        let pooled = self.pool.forward(&h)?;
        let logits = self.classifier.forward(&pooled, gemm)?;
        self.scan(&logits, "logits")?;
        Ok(ForwardOutput { logits, attention })
    }

    /// Back-propagates `dlogits` (and optional gradients injected at the
    /// attention points), filling every parameter gradient and the per-block
    /// activation gradients used for saliency.
    pub fn backward(&mut self, dlogits: &Tensor<T>, attention_grads: Option<&[Tensor<T>]>) -> Result<()> {
        let gemm = self.gemm;
        let ends = self.group_ends();
        if let Some(g) = attention_grads {
            if g.len() != ends.len() {
                return Err(Error::shape(format!(
                    "{} attention gradients for {} attention points",
                    g.len(),
                    ends.len()
                )));
            }
        }
        let d = self.classifier.backward(dlogits, gemm)?;
        let mut d = self.pool.backward(&d)?;
        for i in (0..self.blocks.len()).rev() {
            if let (Some(grads), Some(point)) = (attention_grads, ends.iter().position(|&e| e == i)) {
                d.add_assign(&grads[point])?;
            }
            d = self.blocks[i].backward(&d, gemm)?;
        }
        let d = self.stem_relu.backward(&d)?;
        let d = self.stem_bn.backward(&d)?;
        self.stem.backward(&d, gemm, false)?;
        Ok(())
    }

    /// Prunable activation `C` and its gradient `∂L/∂C` for block `i`, as
    /// cached by the last forward/backward pair.
    pub fn prunable_activation(&self, i: usize) -> Result<(&Tensor<T>, &Tensor<T>)> {
        let b = self
            .blocks
            .get(i)
            .ok_or_else(|| Error::param(format!("no block {i}")))?;
        match (&b.activation, &b.activation_grad) {
            (Some(a), Some(g)) => Ok((a, g)),
            (None, _) => Err(Error::state(format!("block {i} has no cached forward"))),
            (Some(_), None) => Err(Error::state(format!("block {i} has no gradient; call backward first"))),
        }
    }

    /// Every trainable parameter, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = vec![
            &mut self.stem.weight,
            &mut self.stem_bn.gamma,
            &mut self.stem_bn.beta,
        ];
        for b in &mut self.blocks {
            out.push(&mut b.conv1.weight);
            out.push(&mut b.bn1.gamma);
            out.push(&mut b.bn1.beta);
            out.push(&mut b.conv2.weight);
            out.push(&mut b.bn2.gamma);
            out.push(&mut b.bn2.beta);
            if let Some(p) = &mut b.projection {
                out.push(&mut p.weight);
            }
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn zero_dead_params(&mut self) {
        for b in &mut self.blocks {
            b.zero_dead_params();
        }
    }

    /// Masks output channel `channel` of block `block`'s first conv.
    pub fn prune_channel(&mut self, block: usize, channel: usize) -> Result<()> {
        let b = self
            .blocks
            .get_mut(block)
            .ok_or_else(|| Error::param(format!("no block {block}")))?;
        match b.alive.get(channel) {
            Some(true) => {}
            Some(false) => return Err(Error::param(format!("channel {channel} of block {block} already pruned"))),
            None => return Err(Error::param(format!("block {block} has no channel {channel}"))),
        }
        b.alive[channel] = false;
        b.zero_dead_params();
        Ok(())
    }

    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.blocks.iter().map(|b| b.alive.clone()).collect()
    }

    pub fn set_masks(&mut self, masks: &[Vec<bool>]) -> Result<()> {
        if masks.len() != self.blocks.len()
            || masks.iter().zip(&self.blocks).any(|(m, b)| m.len() != b.alive.len())
        {
            return Err(Error::shape("mask layout does not match the network".to_string()));
        }
        if masks.iter().any(|m| !m.iter().any(|&a| a)) {
            return Err(Error::param("every prunable layer needs a live channel".to_string()));
        }
        for (b, m) in self.blocks.iter_mut().zip(masks) {
            b.alive = m.clone();
        }
        self.zero_dead_params();
        Ok(())
    }

    /// Every state tensor (parameters, then batch-norm running statistics),
    /// in the order used by checkpoints.
    pub fn state(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.stem.weight.value, &self.stem_bn.gamma.value, &self.stem_bn.beta.value];
        for b in &self.blocks {
            out.extend([
                &b.conv1.weight.value,
                &b.bn1.gamma.value,
                &b.bn1.beta.value,
                &b.conv2.weight.value,
                &b.bn2.gamma.value,
                &b.bn2.beta.value,
            ]);
            if let Some(p) = &b.projection {
                out.push(&p.weight.value);
            }
        }
        out.push(&self.classifier.weight.value);
        out.push(&self.classifier.bias.value);
        out.extend([&self.stem_bn.running_mean, &self.stem_bn.running_var]);
        for b in &self.blocks {
            out.extend([&b.bn1.running_mean, &b.bn1.running_var, &b.bn2.running_mean, &b.bn2.running_var]);
        }
        out
    }

    fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut params = vec![
            &mut self.stem.weight.value,
            &mut self.stem_bn.gamma.value,
            &mut self.stem_bn.beta.value,
        ];
        let mut stats = vec![&mut self.stem_bn.running_mean, &mut self.stem_bn.running_var];
        for b in &mut self.blocks {
            params.push(&mut b.conv1.weight.value);
            params.push(&mut b.bn1.gamma.value);
            params.push(&mut b.bn1.beta.value);
            params.push(&mut b.conv2.weight.value);
            params.push(&mut b.bn2.gamma.value);
            params.push(&mut b.bn2.beta.value);
            if let Some(p) = &mut b.projection {
                params.push(&mut p.weight.value);
            }
            stats.push(&mut b.bn1.running_mean);
            stats.push(&mut b.bn1.running_var);
            stats.push(&mut b.bn2.running_mean);
            stats.push(&mut b.bn2.running_var);
        }
        params.push(&mut self.classifier.weight.value);
        params.push(&mut self.classifier.bias.value);
        params.extend(stats);
        params
    }

    pub fn load_state(&mut self, tensors: &[Tensor<T>]) -> Result<()> {
        let slots = self.state_mut();
        if slots.len() != tensors.len() {
            return Err(Error::shape(format!(
                "checkpoint holds {} tensors, network expects {}",
                tensors.len(),
                slots.len()
            )));
        }
        for (slot, t) in slots.iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::shape(format!("state tensor {:?} vs {:?}", slot.shape(), t.shape())));
            }
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            *slot = t.clone();
        }
        Ok(())
    }

    /// Physically removes masked channels, returning a network whose spec
    /// widths equal the live widths and whose outputs match this one.
    pub fn compact(&self) -> Result<Network<T>> {
        let spec = self.live_spec();
        let mut out = self.clone();
        out.spec = spec.clone();
        for (b, shape) in out.blocks.iter_mut().zip(spec.block_shapes()) {
            let keep: Vec<usize> = (0..b.alive.len()).filter(|&c| b.alive[c]).collect();
            if keep.len() == b.alive.len() {
                b.shape = shape;
                continue;
            }
            let k = b.conv1.geometry.kernel;
            let w1 = b.conv1.weight.value.gather_outer(&keep)?;
            b.conv1 = Conv2d::from_weight(w1, b.conv1.geometry)?;
            let mut bn1 = BatchNorm2d::new(keep.len());
            for (dst, &src) in keep.iter().enumerate() {
                bn1.gamma.value[dst] = b.bn1.gamma.value[src];
                bn1.beta.value[dst] = b.bn1.beta.value[src];
                bn1.running_mean[dst] = b.bn1.running_mean[src];
                bn1.running_var[dst] = b.bn1.running_var[src];
            }
            b.bn1 = bn1;
            let (o, i) = (b.conv2.out_channels, b.conv2.in_channels);
            let w2 = b.conv2.weight.value.data();
            let mut data = Vec::with_capacity(o * keep.len() * k * k);
            for oc in 0..o {
                for &ic in &keep {
                    data.extend_from_slice(&w2[(oc * i + ic) * k * k..][..k * k]);
                }
            }
            let w2 = Tensor::from_vec(&[o, keep.len(), k, k], data)?;
            b.conv2 = Conv2d::from_weight(w2, b.conv2.geometry)?;
            b.alive = vec![true; keep.len()];
            b.shape = shape;
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Result<Network<U>> {
        let mut out = Network::<U>::new(&self.spec, &mut Rng::new(0))?;
        let state: Vec<Tensor<U>> = self.state().into_iter().map(|t| t.cast()).collect();
        out.load_state(&state)?;
        out.set_masks(&self.masks())?;
        out.gemm = self.gemm;
        out.checked = self.checked;
        Ok(out)
    }
}
