//! Parameter-bearing building blocks shared by the network stages.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::ops::ConvGeometry;
use crate::state::{he_conv_weight, ModelState, ParamId};
use crate::tensor::Tensor;

/// Registers parameters with a fresh random initialisation.
pub struct Registrar<'a, R: Rng> {
    pub state: &'a mut ModelState,
    pub rng: &'a mut R,
}

impl<R: Rng> Registrar<'_, R> {
    pub fn conv(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geom: ConvGeometry,
        frozen: bool,
    ) -> Result<ConvLayer> {
        let w = he_conv_weight(out_ch, in_ch, kernel, self.rng);
        let weight = self.state.register(&format!("{name}.weight"), w, frozen)?;
        let bias = self
            .state
            .register(&format!("{name}.bias"), Tensor::zeros(&[out_ch]), frozen)?;
        Ok(ConvLayer {
            weight,
            bias: Some(bias),
            geom,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
}

impl ConvLayer {
    pub fn forward(&self, g: &mut Graph, s: &ModelState, x: Var) -> Result<Var> {
        self.forward_with(g, s, x, self.geom)
    }

    pub fn forward_with(&self, g: &mut Graph, s: &ModelState, x: Var, geom: ConvGeometry) -> Result<Var> {
        let w = g.param(s, self.weight);
        let b = self.bias.map(|b| g.param(s, b));
        g.conv2d(x, w, b, geom)
    }

    pub fn forward_relu(&self, g: &mut Graph, s: &ModelState, x: Var) -> Result<Var> {
        let y = self.forward(g, s, x)?;
        Ok(g.relu(y))
    }

    pub fn out_channels(&self, s: &ModelState) -> usize {
        s.param(self.weight).tensor.shape()[0]
    }

    /// Set weight and bias to zero.
    pub fn zero(&self, s: &mut ModelState) {
        s.param_mut(self.weight).tensor.data_mut().fill(0.0);
        if let Some(b) = self.bias {
            s.param_mut(b).tensor.data_mut().fill(0.0);
        }
    }
}

/// `relu(shortcut(x) + conv2(relu(conv1(x))))`; the shortcut is a strided 1x1
/// projection when the shape changes and the identity otherwise.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub shortcut: Option<ConvLayer>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng>(
        reg: &mut Registrar<'_, R>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        dilation: usize,
        frozen: bool,
    ) -> Result<Self> {
        let conv1 = reg.conv(
            &format!("{name}.conv1"),
            in_ch,
            out_ch,
            3,
            ConvGeometry::new(stride, dilation, dilation),
            frozen,
        )?;
        let conv2 = reg.conv(
            &format!("{name}.conv2"),
            out_ch,
            out_ch,
            3,
            ConvGeometry::same(3, dilation),
            frozen,
        )?;
        let shortcut = if in_ch != out_ch || stride != 1 {
            Some(reg.conv(
                &format!("{name}.shortcut"),
                in_ch,
                out_ch,
                1,
                ConvGeometry::new(stride, 1, 0),
                frozen,
            )?)
        } else {
            None
        };
        Ok(ResBlock {
            conv1,
            conv2,
            shortcut,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ModelState, x: Var) -> Result<Var> {
        let h = self.conv1.forward_relu(g, s, x)?;
        let y = self.conv2.forward(g, s, h)?;
        let sc = match &self.shortcut {
            Some(proj) => proj.forward(g, s, x)?,
            None => x,
        };
        let sum = g.add(sc, y)?;
        Ok(g.relu(sum))
    }
}
