//! Built-in knowledge base for the twelve abnormality classes.
//!
//! Canonical names, definition texts, synonym tables and negation cues for
//! the seven diseases and five symptoms the default schema covers, plus a
//! template expander that fills each entity's description bank with one
//! hundred distinct paraphrases of its definition.

use super::AbnormalityEntity;

/// Fixed schema order: seven diseases followed by five symptoms.
pub const CANONICAL_ORDER: [&str; 12] = [
    "atrial septal defect",
    "ventricular septal defect",
    "pulmonary valve stenosis",
    "patent ductus arteriosus",
    "patent foramen ovale",
    "aortic stenosis",
    "pulmonary hypertension",
    "prolapse",
    "regurgitation",
    "shunt",
    "hypertrophy",
    "dilation",
];

/// Display abbreviations used in metric tables.
pub fn short_label(canonical_name: &str) -> &'static str {
    match canonical_name {
        "atrial septal defect" => "ASD",
        "ventricular septal defect" => "VSD",
        "pulmonary valve stenosis" => "PVS",
        "patent ductus arteriosus" => "PDA",
        "patent foramen ovale" => "PFO",
        "aortic stenosis" => "AS",
        "pulmonary hypertension" => "PH",
        "prolapse" => "Prolapse",
        "regurgitation" => "Regurgitation",
        "shunt" => "Shunt",
        "hypertrophy" => "Hypertrophy",
        "dilation" => "Dilation",
        _ => "?",
    }
}

/// Default negation cues shared by all entities. Multi-word cues are
/// matched as whole phrases inside the resolver's look-back window.
pub fn default_negation_cues() -> Vec<String> {
    [
        "no",
        "not",
        "without",
        "absent",
        "negative for",
        "denies",
        "ruled out",
        "free of",
        "excludes",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

struct EntitySpec {
    name: &'static str,
    definition: &'static str,
    // Core clause reused by the description-bank templates; lowercase,
    // no trailing period.
    core: &'static str,
    synonyms: &'static [&'static str],
}

// Short all-caps abbreviations are only listed as synonyms where they
// cannot collide with ordinary words under case-insensitive matching
// ("AS" and "PH" are deliberately left out).
const SPECS: [EntitySpec; 12] = [
    EntitySpec {
        name: "atrial septal defect",
        definition: "Atrial septal defect is a congenital opening in the septum between the two atria that allows blood to pass from the left atrium to the right atrium.",
        core: "a congenital opening in the atrial septum that lets blood pass between the atria",
        synonyms: &["atrial septal defect", "ASD", "secundum atrial septal defect", "atrial septum defect"],
    },
    EntitySpec {
        name: "ventricular septal defect",
        definition: "Ventricular septal defect is a hole in the septum separating the two ventricles of the heart, producing abnormal flow between the ventricles.",
        core: "a hole in the septum between the ventricles producing abnormal flow",
        synonyms: &["ventricular septal defect", "VSD", "interventricular septal defect", "ventricular septum defect"],
    },
    EntitySpec {
        name: "pulmonary valve stenosis",
        definition: "Pulmonary valve stenosis is a narrowing of the pulmonary valve that obstructs blood flow from the right ventricle into the pulmonary artery.",
        core: "a narrowing of the pulmonary valve obstructing right ventricular outflow",
        synonyms: &["pulmonary valve stenosis", "PVS", "pulmonic stenosis", "pulmonary stenosis"],
    },
    EntitySpec {
        name: "patent ductus arteriosus",
        definition: "Patent ductus arteriosus is the persistence after birth of the fetal vessel connecting the aorta and the pulmonary artery.",
        core: "a persistent fetal vessel connecting the aorta and the pulmonary artery",
        synonyms: &["patent ductus arteriosus", "PDA", "persistent ductus arteriosus"],
    },
    EntitySpec {
        name: "patent foramen ovale",
        definition: "Patent foramen ovale is an incomplete closure of the flap-like opening in the atrial septum that normally seals after birth.",
        core: "an incomplete closure of the flap-like opening in the atrial septum",
        synonyms: &["patent foramen ovale", "PFO", "persistent foramen ovale"],
    },
    EntitySpec {
        name: "aortic stenosis",
        definition: "Aortic stenosis is a narrowing of the aortic valve opening that restricts blood flow from the left ventricle into the aorta.",
        core: "a narrowing of the aortic valve restricting left ventricular outflow",
        synonyms: &["aortic stenosis", "aortic valve stenosis"],
    },
    EntitySpec {
        name: "pulmonary hypertension",
        definition: "Pulmonary hypertension is an abnormally elevated blood pressure in the pulmonary arteries that strains the right side of the heart.",
        core: "abnormally elevated pressure in the pulmonary arteries",
        synonyms: &["pulmonary hypertension", "pulmonary arterial hypertension"],
    },
    EntitySpec {
        name: "prolapse",
        definition: "Prolapse is the displacement of a heart valve leaflet back into the upstream chamber during contraction, most often affecting the mitral valve.",
        core: "displacement of a valve leaflet into the upstream chamber during contraction",
        synonyms: &["prolapse", "valve prolapse", "mitral valve prolapse", "leaflet prolapse"],
    },
    EntitySpec {
        name: "regurgitation",
        definition: "Regurgitation is the backward leakage of blood through a heart valve that fails to close completely.",
        core: "backward leakage of blood through a valve that fails to close",
        synonyms: &["regurgitation", "valvular regurgitation", "valve insufficiency", "valvular insufficiency"],
    },
    EntitySpec {
        name: "shunt",
        definition: "Shunt is an abnormal passage of blood between the chambers of the heart or between the great vessels.",
        core: "abnormal passage of blood between chambers or great vessels",
        synonyms: &["shunt", "left-to-right shunt", "right-to-left shunt", "intracardiac shunt"],
    },
    EntitySpec {
        name: "hypertrophy",
        definition: "Hypertrophy is an abnormal thickening of the heart muscle, typically of a ventricular wall, in response to increased workload.",
        core: "abnormal thickening of the heart muscle",
        synonyms: &["hypertrophy", "ventricular hypertrophy", "myocardial hypertrophy"],
    },
    EntitySpec {
        name: "dilation",
        definition: "Dilation is an abnormal enlargement of a heart chamber or great vessel beyond its normal dimensions.",
        core: "abnormal enlargement of a heart chamber or great vessel",
        synonyms: &["dilation", "dilatation", "chamber dilation", "chamber enlargement"],
    },
];

const BANK_TEMPLATES: [&str; 10] = [
    "{name} is {core}.",
    "{name}: {core}.",
    "{name} refers to {core}.",
    "{name}, defined as {core}.",
    "The term {name} describes {core}.",
    "{name} denotes {core}.",
    "A finding of {name} means {core}.",
    "{name} is characterized by {core}.",
    "In cardiology, {name} is {core}.",
    "{name} is the diagnosis for {core}.",
];

const BANK_SUFFIXES: [&str; 10] = [
    "",
    " It can be seen on echocardiography.",
    " It occurs in pediatric patients.",
    " It may be detectable on auscultation.",
    " It is confirmed by cardiac imaging.",
    " It is frequently of congenital origin.",
    " Its severity varies between patients.",
    " It belongs to the structural heart findings.",
    " It is described in cardiology references.",
    " It is noted during cardiac examination.",
];

/// One hundred distinct paraphrases of an entity definition, all
/// containing the canonical name.
pub fn description_bank(name: &str, core: &str) -> Vec<String> {
    let mut bank = Vec::with_capacity(BANK_TEMPLATES.len() * BANK_SUFFIXES.len());
    for template in BANK_TEMPLATES {
        for suffix in BANK_SUFFIXES {
            let body = template.replace("{name}", name).replace("{core}", core);
            bank.push(format!("{body}{suffix}"));
        }
    }
    bank
}

/// Look up the built-in entity spec by canonical name.
pub fn known_entity(name: &str, entity_id: usize) -> Option<AbnormalityEntity> {
    SPECS.iter().find(|s| s.name == name).map(|s| AbnormalityEntity {
        entity_id,
        canonical_name: s.name.to_string(),
        definition_text: s.definition.to_string(),
        synonyms: s.synonyms.iter().map(|x| x.to_string()).collect(),
        negation_cues: default_negation_cues(),
        description_bank: description_bank(s.name, s.core),
    })
}

/// A minimal entity for names outside the built-in registry, so schema
/// construction works on arbitrary frequency tables.
pub fn fallback_entity(name: &str, entity_id: usize) -> AbnormalityEntity {
    AbnormalityEntity {
        entity_id,
        canonical_name: name.to_string(),
        definition_text: format!("{name} is a cardiac abnormality finding."),
        synonyms: vec![name.to_string()],
        negation_cues: default_negation_cues(),
        description_bank: description_bank(name, "a cardiac abnormality finding"),
    }
}

/// The synonym table for the built-in schema: surface form -> canonical name.
pub fn default_synonym_table() -> std::collections::BTreeMap<String, String> {
    let mut table = std::collections::BTreeMap::new();
    for s in &SPECS {
        for syn in s.synonyms {
            table.insert(syn.to_string(), s.name.to_string());
        }
    }
    table
}
