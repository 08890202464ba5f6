//! The default benchmark: 14 parts, 8 seen and 4 unseen classes.
//!
//! Several parts share a primitive family (flat panels serve as seat,
//! tabletop, shelf; disks and caps serve as base and lid), so a part's label
//! depends on the object around it.

use std::f64::consts::PI;

use super::geometry::{Primitive, Transform};
use super::{BenchmarkManifest, ObjectTemplate, OptionalPart, PartTemplate, Placement, SplitSizes, GENERATOR_VERSION};

const PARTS: [&str; 14] = [
    "leg", "seat", "back", "arm", "tabletop", "shelf", "side_panel", "door", "body", "neck", "lid", "base",
    "screen", "handle",
];

fn boxp(lo: [f64; 3], hi: [f64; 3]) -> (Primitive, Primitive) {
    (Primitive::BoxPanel { size: lo }, Primitive::BoxPanel { size: hi })
}

fn rod(r: (f64, f64), len: (f64, f64)) -> (Primitive, Primitive) {
    (
        Primitive::Rod { radius: r.0, length: len.0 },
        Primitive::Rod { radius: r.1, length: len.1 },
    )
}

fn cyl(r: (f64, f64), h: (f64, f64)) -> (Primitive, Primitive) {
    (
        Primitive::CylinderShell { radius: r.0, height: h.0 },
        Primitive::CylinderShell { radius: r.1, height: h.1 },
    )
}

fn disk(r: (f64, f64)) -> (Primitive, Primitive) {
    (Primitive::Disk { radius: r.0 }, Primitive::Disk { radius: r.1 })
}

fn cap(r: (f64, f64), h: (f64, f64)) -> (Primitive, Primitive) {
    (Primitive::Cap { radius: r.0, height: h.0 }, Primitive::Cap { radius: r.1, height: h.1 })
}

fn torus(major: (f64, f64), minor: (f64, f64)) -> (Primitive, Primitive) {
    (
        Primitive::TorusArc { major: major.0, minor: minor.0, arc: PI },
        Primitive::TorusArc { major: major.1, minor: minor.1, arc: PI },
    )
}

fn place(part: &str, shape: (Primitive, Primitive), transform: Transform, fraction: f64) -> Placement {
    Placement {
        template: PartTemplate {
            part: part.into(),
            low: shape.0,
            high: shape.1,
        },
        transform,
        fraction,
        optional: None,
    }
}

fn optional(mut p: Placement, group: &str, probability: f64) -> Placement {
    p.optional = Some(OptionalPart {
        group: group.into(),
        probability,
    });
    p
}

fn at(x: f64, y: f64, z: f64) -> Transform {
    Transform::at([x, y, z])
}

fn object(name: &str, seen: bool, placements: Vec<Placement>) -> ObjectTemplate {
    ObjectTemplate {
        name: name.into(),
        seen,
        placements,
    }
}

fn legs(spread: (f64, f64), y: f64, length: (f64, f64), fraction: f64) -> Vec<Placement> {
    [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]
        .iter()
        .map(|&(sx, sz)| place("leg", rod((0.03, 0.05), length), at(sx * spread.0, y, sz * spread.1), fraction))
        .collect()
}

fn seen_classes() -> Vec<ObjectTemplate> {
    let mut chair = vec![
        place("seat", boxp([0.7, 0.06, 0.7], [0.9, 0.1, 0.9]), at(0.0, 0.5, 0.0), 0.25),
        place("back", boxp([0.7, 0.6, 0.05], [0.9, 0.9, 0.08]), at(0.0, 0.95, -0.4), 0.25),
    ];
    chair.extend(legs((0.35, 0.35), 0.25, (0.45, 0.55), 0.07));
    for x in [-0.42, 0.42] {
        chair.push(optional(
            place("arm", rod((0.03, 0.04), (0.6, 0.8)), at(x, 0.75, 0.0).rotated([90.0, 0.0, 0.0]), 0.11),
            "arms",
            0.5,
        ));
    }

    let mut table = vec![place("tabletop", boxp([1.2, 0.04, 0.7], [1.5, 0.07, 0.9]), at(0.0, 0.75, 0.0), 0.4)];
    table.extend(legs((0.55, 0.32), 0.37, (0.7, 0.75), 0.08));
    table.push(optional(
        place("shelf", boxp([1.0, 0.03, 0.5], [1.2, 0.05, 0.7]), at(0.0, 0.25, 0.0), 0.28),
        "shelf",
        0.5,
    ));

    let storage = vec![
        place("side_panel", boxp([0.04, 1.0, 0.5], [0.06, 1.3, 0.6]), at(-0.5, 0.6, 0.0), 0.15),
        place("side_panel", boxp([0.04, 1.0, 0.5], [0.06, 1.3, 0.6]), at(0.5, 0.6, 0.0), 0.15),
        place("tabletop", boxp([1.0, 0.04, 0.55], [1.1, 0.06, 0.65]), at(0.0, 1.25, 0.0), 0.15),
        place("shelf", boxp([0.9, 0.03, 0.5], [0.95, 0.04, 0.55]), at(0.0, 0.4, 0.0), 0.12),
        place("shelf", boxp([0.9, 0.03, 0.5], [0.95, 0.04, 0.55]), at(0.0, 0.8, 0.0), 0.12),
        optional(
            place("door", boxp([0.9, 1.0, 0.02], [1.0, 1.2, 0.03]), at(0.0, 0.62, 0.3), 0.3),
            "door",
            0.5,
        ),
    ];

    let bottle = vec![
        place("body", cyl((0.25, 0.32), (0.7, 0.9)), at(0.0, 0.0, 0.0), 0.6),
        place("neck", cyl((0.08, 0.11), (0.2, 0.3)), at(0.0, 0.8, 0.0), 0.25),
        optional(place("lid", cap((0.1, 0.13), (0.05, 0.08)), at(0.0, 1.05, 0.0), 0.15), "lid", 0.5),
    ];

    let vase = vec![
        place("body", cyl((0.3, 0.38), (0.6, 0.8)), at(0.0, 0.05, 0.0), 0.55),
        place("base", disk((0.3, 0.38)), at(0.0, 0.05, 0.0), 0.2),
        place("neck", cyl((0.15, 0.2), (0.15, 0.25)), at(0.0, 0.75, 0.0), 0.25),
    ];

    let display = vec![
        place("screen", boxp([1.0, 0.6, 0.03], [1.3, 0.8, 0.05]), at(0.0, 0.8, 0.0), 0.6),
        place("neck", rod((0.04, 0.06), (0.35, 0.45)), at(0.0, 0.3, 0.0), 0.2),
        place("base", disk((0.2, 0.3)), at(0.0, 0.05, 0.0), 0.2),
    ];

    let pot = vec![
        place("body", cyl((0.35, 0.42), (0.4, 0.55)), at(0.0, 0.0, 0.0), 0.5),
        place("lid", cap((0.35, 0.42), (0.08, 0.14)), at(0.0, 0.5, 0.0), 0.26),
        place("handle", torus((0.1, 0.13), (0.02, 0.03)), at(0.4, 0.3, 0.0), 0.12),
        place("handle", torus((0.1, 0.13), (0.02, 0.03)), at(-0.4, 0.3, 0.0).rotated([0.0, 180.0, 0.0]), 0.12),
    ];

    let lamp = vec![
        place("base", disk((0.2, 0.28)), at(0.0, 0.0, 0.0), 0.25),
        place("neck", rod((0.025, 0.035), (0.8, 1.0)), at(0.0, 0.45, 0.0), 0.3),
        place("lid", cap((0.25, 0.32), (0.15, 0.22)), at(0.0, 0.9, 0.0), 0.45),
    ];

    vec![
        object("chair", true, chair),
        object("table", true, table),
        object("storage", true, storage),
        object("bottle", true, bottle),
        object("vase", true, vase),
        object("display", true, display),
        object("pot", true, pot),
        object("lamp", true, lamp),
    ]
}

fn unseen_classes() -> Vec<ObjectTemplate> {
    // Unseen parts reuse the templates of the seen classes they come from.
    let cup = vec![
        place("body", cyl((0.3, 0.38), (0.6, 0.8)), at(0.0, 0.05, 0.0), 0.75),
        place("base", disk((0.3, 0.38)), at(0.0, 0.05, 0.0), 0.25),
    ];
    let mug = vec![
        place("body", cyl((0.3, 0.38), (0.6, 0.8)), at(0.0, 0.05, 0.0), 0.6),
        place("base", disk((0.3, 0.38)), at(0.0, 0.05, 0.0), 0.2),
        place("handle", torus((0.1, 0.13), (0.02, 0.03)), at(0.36, 0.45, 0.0), 0.2),
    ];
    // A tabletop with a display screen hinged at its back edge: chair-like in
    // silhouette, built from table and display parts.
    let laptop = vec![
        place("tabletop", boxp([1.2, 0.04, 0.7], [1.5, 0.07, 0.9]), at(0.0, 0.0, 0.0), 0.5),
        place(
            "screen",
            boxp([1.0, 0.6, 0.03], [1.3, 0.8, 0.05]),
            at(0.0, 0.36, -0.48).rotated([-15.0, 0.0, 0.0]),
            0.5,
        ),
    ];
    // A large panel with a small knob: the handle is far smaller, relative
    // to the object, than any seen handle.
    let gate = vec![
        place("door", boxp([1.4, 1.6, 0.04], [1.6, 1.8, 0.06]), at(0.0, 0.85, 0.0), 0.9),
        place(
            "handle",
            torus((0.04, 0.05), (0.01, 0.015)),
            at(0.6, 0.9, 0.04).rotated([90.0, 0.0, 0.0]),
            0.1,
        ),
    ];
    vec![
        object("cup", false, cup),
        object("mug", false, mug),
        object("laptop", false, laptop),
        object("gate", false, gate),
    ]
}

pub fn default_manifest() -> BenchmarkManifest {
    let mut objects = seen_classes();
    objects.extend(unseen_classes());
    BenchmarkManifest {
        version: GENERATOR_VERSION,
        seed: 20240611,
        points_per_cloud: 512,
        jitter: 0.005,
        stretch: 0.15,
        parts: PARTS.iter().map(|s| s.to_string()).collect(),
        splits: SplitSizes {
            train: 200,
            val: 40,
            test: 40,
        },
        objects,
    }
}
