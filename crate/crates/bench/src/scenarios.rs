/// Scenario files shipped with the binary, by name.
pub const BUNDLED: [(&str, &str); 4] = [
    ("failfree_4", include_str!("../scenarios/failfree_4.scn")),
    (
        "leader_crash",
        include_str!("../scenarios/leader_crash.scn"),
    ),
    ("equivocate", include_str!("../scenarios/equivocate.scn")),
    (
        "two_failures",
        include_str!("../scenarios/two_failures.scn"),
    ),
];

/// Accepts `leader_crash` as well as `leader_crash.scn`.
pub fn bundled(name: &str) -> Option<&'static str> {
    let stem = name.strip_suffix(".scn").unwrap_or(name);
    BUNDLED
        .iter()
        .find(|(n, _)| *n == stem)
        .map(|(_, text)| *text)
}
