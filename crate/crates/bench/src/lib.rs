//! Workloads shared by the benchmarks and their smoke test.

use aperture_fabric::dsp::RangeFftConfig;
use aperture_fabric::pipeline::{self, Prepared, Processed, RunOptions};
use aperture_fabric::{CalibParams, RawDataCube, Scenario};

/// The shipped reference scenario, prepared, simulated and range-processed.
pub struct Workload {
    pub prepared: Prepared,
    pub cube: RawDataCube,
    pub processed: Processed,
}

impl Workload {
    pub fn new(name: &str) -> Self {
        let scenario = Scenario::shipped(name).expect("shipped scenario");
        let prepared = Prepared::new(&scenario, &RunOptions::default()).expect("scenario resolves");
        let cube = pipeline::simulate(&prepared).expect("synthesis");
        let processed = pipeline::process(&prepared, &cube).expect("range processing");
        Self {
            prepared,
            cube,
            processed,
        }
    }

    pub fn fft_config(&self) -> RangeFftConfig {
        self.prepared.scenario.processing.range_fft
    }

    pub fn nominal(&self) -> CalibParams {
        CalibParams::nominal(self.prepared.resolved.fabric.modules.len())
    }
}
