use patlm::corpus::{corpus_from_text, Alphabet, SourceProfile};
use patlm::crf::train_crf;
use patlm::mining::mine_patterns;
use patlm::owlqn::OwlqnConfig;
use patlm::synth::{generate, SynthConfig};

#[test]
fn stronger_regularization_selects_fewer_patterns() {
    let s = generate(&SynthConfig {
        tokens: 8000,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut alphabet = Alphabet::new();
    let corpus = corpus_from_text(&s.train, SourceProfile::Raw, &mut alphabet);
    let cands = mine_patterns(&corpus, 60, 8).unwrap();
    assert!(cands.len() > 20);
    let selected: Vec<usize> = [3.0, 30.0, 300.0, 3000.0]
        .iter()
        .map(|&c| {
            let (table, _) = train_crf(&corpus, alphabet.len(), cands.patterns.clone(), c, &OwlqnConfig::default()).unwrap();
            table.select_patterns().len()
        })
        .collect();
    for pair in selected.windows(2) {
        assert!(pair[1] <= pair[0], "{selected:?}");
    }
    assert!(selected[0] > selected[3], "{selected:?}");
}
