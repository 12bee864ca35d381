//! Tree shape, metadata size and bitmap-index size for a range of memory
//! sizes, plus the NVM offset and ancestry of one address.
//!
//!     cargo run --example geometry_layout [address]

use star_sim::{Geometry, LineId};

fn main() -> star_sim::Result<()> {
    let addr: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0x1234_5640);
    println!("{:>9} {:>7} {:>12} {:>12} {:>8} {:>8}", "mem", "levels", "counters", "sit nodes", "L1 bmp", "L2 bmp");
    for gib in [1u64, 2, 4, 8, 16] {
        let g = Geometry::new(gib << 30)?;
        println!(
            "{:>6} GiB {:>7} {:>12} {:>12} {:>8} {:>8}",
            gib,
            g.levels_including_root(),
            g.counter_blocks(),
            g.sit_nodes(),
            g.bitmap_l1_lines(),
            g.bitmap_l2_lines()
        );
    }

    let g = Geometry::new(1 << 30)?;
    let mut id = LineId::data(addr / 64);
    println!("\nancestry of byte address {addr:#x} in 1 GiB:");
    while !g.is_root(id) {
        println!("  {id:?} at NVM offset {:#x}", g.offset_of(id)?);
        id = g.parent_of(id)?;
    }
    println!("  {id:?} on chip");
    Ok(())
}
