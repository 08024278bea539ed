use tractjoint::gradcheck::{gradient_battery, BatteryOptions, TOLERANCE};

#[test]
fn every_loss_passes_through_the_full_network() {
    let checks = gradient_battery(&BatteryOptions::default()).unwrap();
    let names: Vec<_> = checks.iter().map(|c| c.name).collect();
    for expected in [
        "equivariance",
        "diversity",
        "metric_alignment",
        "registration",
        "kl",
    ] {
        assert!(names.contains(&expected));
    }
    for c in &checks {
        assert!(
            c.max_relative_error < TOLERANCE,
            "{}: {:e}",
            c.name,
            c.max_relative_error
        );
        assert!(c.entries_checked > 0);
    }
}

#[test]
fn corrupted_gradients_are_caught() {
    let checks = gradient_battery(&BatteryOptions {
        fault_injection: true,
        ..Default::default()
    })
    .unwrap();
    assert!(checks.iter().any(|c| c.max_relative_error >= TOLERANCE));
}
