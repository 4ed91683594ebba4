use crate::sh::GradientScheme;

pub const DEFAULT_BVAL: f64 = 1000.0;

/// 32 unit directions from electrostatic-repulsion optimization over
/// antipodal point pairs (fixed seed, frozen table). Minimum pairwise
/// angular separation 24.7 degrees; the order-6 SH basis over these
/// directions has condition number 1.16.
pub const ELECTROSTATIC_32: [[f64; 3]; 32] = [
    [-0.04953547134266765, 0.99487925016686285, 0.08809945894431090],
    [-0.46262824169477129, 0.88093042279744371, 0.09968299843163522],
    [-0.98645156535631406, 0.12185544857051142, 0.10983878577149842],
    [-0.79575290013392785, 0.58667884699110562, 0.15028390606325706],
    [-0.90840672353798047, -0.38744815777117364, 0.15710235412212917],
    [-0.64533778260376817, -0.74280502889974187, 0.17826899726341966],
    [-0.26260788000704699, -0.93961075912124958, 0.21947374034675238],
    [0.95426634484796169, 0.18581268936829445, 0.23419946105880105],
    [0.39177441660551660, 0.88866301437329254, 0.23830831579779263],
    [0.88683152089900108, -0.39337407510642231, 0.24245966793289883],
    [0.74703858715015659, 0.61000946503762965, 0.26423815370457565],
    [0.59696995125867391, -0.73886207316550456, 0.31258553090600549],
    [0.19066211698963009, -0.91405878256151818, 0.35797276316388660],
    [-0.86093671269564165, -0.10901446142717661, 0.49689417780103329],
    [-0.04260748744588859, 0.86446292961003224, 0.50088765740791519],
    [-0.79322559870031806, 0.33021304126328593, 0.51161752994416965],
    [-0.47727450324691062, 0.70758459090257153, 0.52108837567888167],
    [0.83465754209791498, -0.09210753657611011, 0.54301288117773761],
    [-0.63570771847528529, -0.51086081398183147, 0.57870279540431480],
    [-0.25154874601289201, -0.75437269169167087, 0.60633742290015791],
    [0.68803757620881079, 0.35468326927774230, 0.63309088780297373],
    [0.36965256679293906, 0.67612374049203650, 0.63734893693050809],
    [0.57654308969183377, -0.47106944014534841, 0.66760141423587660],
    [0.17970333273561334, -0.66370417355542155, 0.72608779235628818],
    [-0.46752565067135243, 0.34387595806137977, 0.81435194567932168],
    [-0.08300181283016718, 0.56249802044857244, 0.82262183052624072],
    [-0.55956469469259540, -0.09148689427571274, 0.82372173737820409],
    [0.52326473916969374, -0.03702620613067716, 0.85136541672846988],
    [-0.24793505024970716, -0.40162189452532954, 0.88160539057764387],
    [0.26666295417654551, 0.30603642027122990, 0.91391059646849948],
    [0.17314571059809900, -0.26509156233412667, 0.94854995992869617],
    [-0.12732670855864467, 0.07523082371698414, 0.98900365643939148],
];

/// Default acquisition: 2 b0 volumes followed by 32 directions at b=1000.
pub fn default_scheme() -> GradientScheme {
    let mut bvecs = vec![[0.0, 0.0, 0.0]; 2];
    let mut bvals = vec![0.0; 2];
    bvecs.extend_from_slice(&ELECTROSTATIC_32);
    bvals.extend(std::iter::repeat(DEFAULT_BVAL).take(32));
    GradientScheme::new(bvecs, bvals).expect("constant scheme is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_directions_are_unit() {
        for (i, d) in ELECTROSTATIC_32.iter().enumerate() {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-12, "direction {i} has norm {n}");
        }
    }

    #[test]
    fn default_scheme_shape() {
        let s = default_scheme();
        assert_eq!(s.len(), 34);
        assert_eq!(s.b0_indices(), vec![0, 1]);
        assert_eq!(s.dw_indices().len(), 32);
    }

    #[test]
    fn directions_well_separated() {
        let mut min_angle = f64::INFINITY;
        for i in 0..32 {
            for j in (i + 1)..32 {
                let a = ELECTROSTATIC_32[i];
                let b = ELECTROSTATIC_32[j];
                let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).abs().min(1.0);
                min_angle = min_angle.min(dot.acos().to_degrees());
            }
        }
        assert!(min_angle > 20.0, "min pairwise angle {min_angle}");
    }
}
