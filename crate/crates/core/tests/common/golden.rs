use impedance_core::sim::ScenarioConfig;

/// Short scenarios whose traces are kept under tests/data.
pub fn golden_scenarios() -> Vec<(&'static str, ScenarioConfig)> {
    let mut slider = ScenarioConfig::static_slider();
    slider.duration = 1.5;
    slider.seed = 7;
    let mut pulsating = ScenarioConfig::pulsating();
    pulsating.duration = 1.5;
    pulsating.seed = 8;
    let spring = ScenarioConfig::quick(1500.0, 1.0);
    vec![("slider", slider), ("pulsating", pulsating), ("spring", spring)]
}
