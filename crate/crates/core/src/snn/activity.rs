/// Spikes emitted per time step per spiking layer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SpikeTrace {
    pub steps: Vec<Vec<u64>>,
}

impl SpikeTrace {
    pub fn record(&mut self, per_layer: Vec<u64>) {
        self.steps.push(per_layer);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SpikeTally {
    pub total: u64,
    pub per_layer: Vec<u64>,
}

pub fn spike_count(trace: &SpikeTrace) -> SpikeTally {
    let layers = trace.steps.iter().map(Vec::len).max().unwrap_or(0);
    let mut per_layer = vec![0u64; layers];
    for step in &trace.steps {
        for (acc, &n) in per_layer.iter_mut().zip(step) {
            *acc += n;
        }
    }
    SpikeTally {
        total: per_layer.iter().sum(),
        per_layer,
    }
}
